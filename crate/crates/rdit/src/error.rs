//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RditError {
    #[error("config parse error at {location}: {message}")]
    ConfigParse { location: String, message: String },

    #[error("config validation failed for `{field}`: {message}")]
    ConfigInvalid { field: String, message: String },

    #[error("unknown preset `{0}` (expected one of B/16, L/16, H/16, B/32, L/32, toy)")]
    UnknownPreset(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("non-finite value detected in {0}")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("analysis error: {0}")]
    Analysis(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RditError>;

impl RditError {
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        RditError::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }
}
