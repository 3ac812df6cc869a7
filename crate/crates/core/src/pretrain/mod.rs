//! Self-supervised pretraining: ensemble-pair and channel-swap examples,
//! their two binary objectives, and the training loop with ablations.

mod loss;
mod sampling;
mod train;

pub use loss::{pretrain_losses, pretrain_objective, reconstruction_loss_l1, BatchObjective, LossFlags, PretrainLossReport};
pub use sampling::{
    apply_channel_swaps, blur_coordinates, randomize_labels, sample_ensemble_pair, PretrainExample, Replacement, SizeRange,
    SwapMode,
};
pub use train::{
    evaluate, run_pretraining, sample_example, validation_examples, write_log_csv, Ablation, LogRow, LrSchedule,
    PretrainConfig, PretrainData, PretrainOutcome,
};

use crate::encoding::EncodingError;
use crate::engine::EngineError;
use crate::model::{Checkpoint, ModelError};

#[derive(Debug, thiserror::Error)]
pub enum PretrainError {
    #[error("invalid pretraining config: {0}")]
    InvalidConfig(String),
    #[error("ensembles need {requested} channels but the subject has {channels}")]
    EnsembleTooLarge { requested: usize, channels: usize },
    #[error("training diverged at step {step} ({what})")]
    Diverged {
        step: u64,
        what: String,
        /// Last validated weights, widened to `f64`.
        last_good: Box<Checkpoint<f64>>,
    },
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}
