//! Differentiable computation substrate: tensors, a recorded graph with
//! reverse-mode gradients, optimizers and learning-rate schedules.

mod graph;
pub mod ops;
mod optim;
mod params;
mod real;
mod schedule;
mod tensor;

pub use graph::{Gradients, Graph, ParamId, Var};
pub use ops::{dropout, gelu, layer_norm, softmax_rows, Mode};
pub use optim::{adamw_step, lamb_step, Hyper, Optimizer, OptimizerKind, OptimizerState};
pub use params::Params;
pub use real::{DType, Real};
pub use schedule::{lr_at, ScheduleConfig};
pub use tensor::Tensor;

/// Seeded generator used for every stochastic choice in the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EngineError {
    #[error("loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite gradient produced by `{op}` (node {node})")]
    NonFiniteGradient { op: &'static str, node: usize },
    #[error("non-finite gradient for parameter `{param}`; step aborted")]
    NonFiniteParamGradient { param: String },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
}
