//! Error types, one enum per subsystem.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch, lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("masked_softmax: row {row} is fully masked")]
    FullyMaskedRow { row: usize },
    #[error("conv1d_time: kernel_size {kernel_size} must be >= 1")]
    BadKernel { kernel_size: usize },
    #[error("conv1d_time: left_pad {left_pad} + right_pad {right_pad} != kernel_size {kernel_size} - 1")]
    BadPadding {
        kernel_size: usize,
        left_pad: usize,
        right_pad: usize,
    },
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },
}

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("{active} active speakers exceed s_max {s_max}")]
    TooManySpeakers { active: usize, s_max: usize },
    #[error("label shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("labels must be binary, found {value} at frame {frame}, speaker {speaker}")]
    NonBinary { value: f64, frame: usize, speaker: usize },
    #[error("frame periods differ: {lhs} vs {rhs}")]
    FramePeriodMismatch { lhs: f64, rhs: f64 },
    #[error("label file line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input feature dim {got} does not match configured dim {expected}")]
    FeatureDimMismatch { got: usize, expected: usize },
    #[error("cache holds {cache_frames} frames but config expects {context}")]
    CacheMismatch { cache_frames: usize, context: String },
    #[error("embedding row {row} has norm {norm}, expected unit norm (tolerance {tol})")]
    NotUnitNorm { row: usize, norm: f64, tol: f64 },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("push on a closed stream")]
    PushAfterClose,
    #[error("flush on a closed stream")]
    DoubleFlush,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}; parameters left unchanged")]
    NonFiniteLoss { step: u64 },
    #[error("learning rate must be positive, got {lr}")]
    BadLearningRate { lr: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid mixture spec: {reason}")]
    InvalidSpec { reason: String },
    #[error("feature file {path}: {reason}")]
    BadFeatureFile { path: String, reason: String },
    #[error("feature dim {got} in file does not match expected {expected}")]
    FeatureDimMismatch { got: usize, expected: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Top-level error for whole workflows (training runs, CLI commands).
#[derive(Debug, Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
