//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("degenerate convolution output: {0}")]
    DegenerateOutput(String),

    #[error("batch too small: {0}")]
    BatchTooSmall(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("loss tensor is not recorded on this tape")]
    DetachedLoss,

    #[error("kernel count {kernels} does not match batch size {batch}")]
    KernelCountMismatch { kernels: usize, batch: usize },

    #[error("anchor {0} has no positive in the batch")]
    NoPositive(usize),

    #[error("anchor {0} has no negative in the batch")]
    NoNegative(usize),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid dataset spec: {0}")]
    SpecInvalid(String),

    #[error("dataset has {have} identities, need at least {need}")]
    TooFewIdentities { have: usize, need: usize },

    #[error("no query retains a valid positive after cross-camera filtering")]
    NoValidQuery,

    #[error("all fusion weights are zero")]
    AllZeroWeights,

    #[error("invalid config: {0}")]
    ConfigInvalid(String),

    #[error("checkpoint version {found} unsupported (expected {expected})")]
    CheckpointVersionMismatch { found: u16, expected: u16 },

    #[error("malformed file: {0}")]
    FormatError(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
