//! Adam optimization of the CTC objective, evaluation, early stopping and
//! checkpointing.

mod adam;
mod checkpoint;
mod config;
mod loss;
mod trainer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{config_hash, Checkpoint, CheckpointHeader, TensorEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{EvalMetric, TrainConfig};
pub use loss::batch_ctc_loss;
pub use trainer::{
    epoch_rng, evaluate, transcribe, EpochRecord, EpochStats, Evaluation, FitOutcome, Progress, StepOutcome,
    Trainer, MAX_NON_FINITE_STREAK,
};

use thiserror::Error;

use crate::ctc::CtcError;
use crate::data::DataError;
use crate::metrics::MetricsError;
use crate::model::ModelError;
use crate::tensor::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid training field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("non-finite gradient in {param} (element {index}); step rejected")]
    NonFiniteGradient { param: String, index: usize },
    #[error("optimizer: {0}")]
    Optimizer(String),
    #[error("epoch {epoch} aborted after {streak} consecutive non-finite losses")]
    Diverged { epoch: usize, streak: usize },
    #[error("dataset `{0}` is empty")]
    EmptyDataset(String),
    #[error("batch: {0}")]
    Batch(String),
    #[error("charset has {charset} symbols but the model expects {model}")]
    CharsetMismatch { charset: usize, model: usize },
    #[error("no charset attached to the trainer")]
    NoCharset,
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}
