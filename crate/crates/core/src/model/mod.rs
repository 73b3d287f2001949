//! The gated fully convolutional network: configuration, layer list,
//! trainable model, and architecture auditing.

mod audit;
mod calibrate;
mod config;
mod layers;
mod network;

pub use audit::{
    convolution_tally, count_parameters, count_parameters_for_config, ending_gate_sweep, receptive_field,
    ArchitectureAudit, ConvolutionTally, FieldRow, LayerParams, ParameterReport, ReceptiveField, SweepRow,
    REFERENCE_SWEEP,
};
pub use calibrate::{
    calibrate_channels, discrepancy_report, ending_delta, reference_totals, rows_for, solve_ending_channels,
    Calibration, CandidateSpace, EndingCheck, RowDiscrepancy,
};
pub use config::{gateblock_count_for_height, ArchitectureConfig, ParamLayout, DEFAULT_INIT_GAIN, MAX_ENDING_GATES};
pub use layers::{build_layer_specs, LayerKind, LayerSpec};
pub use network::{
    lattices_from_log_probs, BatchStatUpdate, ForwardPass, Model, Param, RunningStats, BATCH_NORM_MOMENTUM,
    NORM_EPS,
};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid architecture field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("height schedule fails at layer `{layer}` (height {height}): {reason}")]
    HeightSchedule { layer: String, height: usize, reason: String },
    #[error("input of shape {shape:?} does not match a [B, 1, {expected_height}, W] batch")]
    InputShape { expected_height: usize, shape: Vec<usize> },
    #[error("input width {width} yields no output frames (need at least 4 columns)")]
    TooNarrow { width: usize },
    #[error("calibration: {0}")]
    Calibration(String),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Internal(String),
}
