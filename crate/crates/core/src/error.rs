//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not line up.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A NaN or infinity showed up where finite data is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A factorization hit a non-positive pivot; the input is not the
    /// Hermitian positive definite matrix the caller promised.
    #[error("numerical degeneracy: {0}")]
    Degenerate(String),

    /// QR met a (near-)zero diagonal pivot.
    #[error("rank deficient: {0}")]
    RankDeficient(String),

    /// Data that should have been structurally valid was not.
    #[error("corrupted data: {0}")]
    Corrupt(String),

    /// A caller-supplied argument is outside the contract.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Configuration failed validation.
    #[error("invalid config: {field}: {message}")]
    InvalidConfig { field: String, message: String },

    /// A file does not parse under its declared format.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// A file parsed, but disagrees with the expected configuration.
    #[error("mismatch: {0}")]
    Mismatch(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid_config(field: &str, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.to_string(),
            message: message.into(),
        }
    }

    pub fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
