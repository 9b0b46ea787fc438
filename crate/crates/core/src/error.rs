//! Error type shared by every module of the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents are incompatible with the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A model, optimizer or run configuration cannot be realized.
    #[error("config error: {0}")]
    Config(String),

    /// An image cannot be turned into a token sequence.
    #[error("tokenization error: {0}")]
    Tokenize(String),

    /// A dataset or checkpoint file violates its binary layout.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// An API contract was violated (e.g. backward on a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn format_at(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    /// Short machine-parseable category tag, used by the CLI error channel.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Tokenize(_) => "tokenize",
            Error::Format { .. } => "format",
            Error::Contract(_) => "contract",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
