//! Downstream decoding: fine-tuning, frozen probes, aggregation baselines,
//! metrics and sweep harnesses.

mod baseline;
mod finetune;
mod metrics;
mod sweep;
mod task;

pub use baseline::{
    deepnn_agg_baseline, linear_agg_baseline, rank_channels, train_baseline, BaselineConfig, BaselineKind, BaselineModel,
};
pub use finetune::{cls_features, finetune, frozen_probe, predict_windows, score, FinetuneConfig, Init, TrainControl};
pub use metrics::{balanced_accuracy, mean_and_se, roc_auc, steps_to_convergence};
pub use sweep::{channel_scaling_sweep, sample_efficiency_sweep, write_curve_csv, CurveRow, Decoder};
pub use task::{EvalReport, TaskDataset};

use crate::encoding::EncodingError;
use crate::engine::EngineError;
use crate::model::ModelError;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DecodeError {
    #[error("labels contain a single class")]
    SingleClass,
    #[error("{0} split has no examples of one class")]
    EmptyClass(&'static str),
    #[error("labels must be 0 or 1")]
    NonBinaryLabels,
    #[error("scores contain NaN")]
    NonFiniteScore,
    #[error("baseline expects {expected} input features, got {found}; ensembles must have a fixed size")]
    VariableEnsemble { expected: usize, found: usize },
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Engine(String),
}

impl From<EngineError> for DecodeError {
    fn from(e: EngineError) -> Self {
        DecodeError::Engine(e.to_string())
    }
}
