//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FloodError {
    /// Tensor or sequence shapes do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid configuration or argument values.
    #[error("config error: {0}")]
    Config(String),

    /// A NaN or infinity showed up where only finite values are allowed.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Training loss blew up beyond the abort threshold.
    #[error("divergence: {0}")]
    Divergence(String),

    /// On-disk format violations (bad magic, truncation, header mismatch).
    #[error("format error: {0}")]
    Format(String),

    /// A prompt that is not part of the model vocabulary.
    #[error("unknown prompt: {0}")]
    Vocab(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl FloodError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        FloodError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, FloodError>;
