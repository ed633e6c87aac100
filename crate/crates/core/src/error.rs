use thiserror::Error;

/// Unified error type for the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left {lhs:?} vs right {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op} expects {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },

    #[error("{op}: operands belong to different tapes")]
    TapeMismatch { op: &'static str },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("missing gradient for parameter {index} ({name})")]
    MissingGradient { index: usize, name: String },

    #[error("missing weight for sample {id}")]
    MissingWeight { id: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("test set is not context-balanced: {0}")]
    UnbalancedTestSet(String),

    #[error("checkpoint not found: {path}")]
    CheckpointMissing { path: String },

    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
