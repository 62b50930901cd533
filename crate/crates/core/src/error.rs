//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DeattError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("degenerate softmax row {row}: all entries masked")]
    DegenerateRow { row: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("numeric abort at step {step}: {reason}")]
    NumericAbort { step: usize, reason: String },

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DeattError>;
