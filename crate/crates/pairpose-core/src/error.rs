//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },

    #[error("{0}: empty input")]
    EmptyInput(&'static str),

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("{op}: index {index} out of range for {len} rows")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },

    #[error("degenerate quaternion: norm {norm:e} is below {min:e}")]
    DegenerateQuaternion { norm: f64, min: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("scene fully occluded: {visible} visible points, need at least {min}")]
    FullyOccluded { visible: usize, min: usize },

    #[error("malformed file at byte {offset}: {reason}")]
    MalformedFile { offset: u64, reason: String },

    #[error("non-finite value in {context} at step {step}")]
    NonFinite { context: String, step: u64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("not implemented: {0}")]
    Unimplemented(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Stable machine-readable tag for the error category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } | Error::BadShape { .. } => "shape",
            Error::EmptyInput(_) => "empty_input",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::DegenerateQuaternion { .. } => "degenerate_quaternion",
            Error::Contract(_) => "contract",
            Error::FullyOccluded { .. } => "fully_occluded",
            Error::MalformedFile { .. } => "malformed_file",
            Error::NonFinite { .. } => "non_finite",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Unimplemented(_) => "unimplemented",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
