//! Error taxonomy shared across the crate.

use thiserror::Error;

/// Everything that can go wrong, bucketed the way callers need to react.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// A value fell outside its documented range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A category or domain label is out of range.
    #[error("label error: {0}")]
    Label(String),

    /// Dataset content violates a contract (missing labels, empty batch, ...).
    #[error("data error: {0}")]
    Data(String),

    /// On-disk format problem: bad version, truncation, metadata mismatch.
    #[error("format error: {0}")]
    Format(String),

    /// Configuration is internally inconsistent or incompatible.
    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite values or other numeric failure.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An API contract was violated (non-scalar backward root, simplex violation, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
