//! Crate-wide error type.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum EmorecError {
    /// Bad configuration value or combination.
    #[error("config: {0}")]
    Config(String),

    /// Malformed dataset, checkpoint, or config file.
    #[error("format: {0}")]
    Format(String),

    /// Data failed an invariant check (non-finite values, bad shapes, ...).
    #[error("validation: {0}")]
    Validation(String),

    /// Unknown id (sample, split, parameter, ...).
    #[error("lookup: {0}")]
    Lookup(String),

    /// Shape mismatch inside the numeric core.
    #[error("shape: {0}")]
    Shape(String),

    /// Training produced a non-finite loss.
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EmorecError>;
