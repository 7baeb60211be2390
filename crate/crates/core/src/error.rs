use thiserror::Error;

/// Errors raised by the numerical kernels, the model and the data pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("backward called on {0} without a cached forward pass")]
    MissingCache(&'static str),

    #[error("degenerate batch statistics: channel {channel} has only {count} element(s)")]
    DegenerateBatch { channel: usize, count: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite value in {context} at index {index}")]
    NonFinite { context: String, index: usize },

    #[error("parse error in {path}, row {row}, column {column}: {reason}")]
    Parse {
        path: String,
        row: usize,
        column: usize,
        reason: String,
    },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("mask cache: {0}")]
    MaskCache(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(
    context: &'static str,
    expected: impl std::fmt::Debug,
    actual: impl std::fmt::Debug,
) -> Error {
    Error::Shape {
        context,
        expected: format!("{expected:?}"),
        actual: format!("{actual:?}"),
    }
}
