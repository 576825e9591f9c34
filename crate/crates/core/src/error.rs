use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Parse failures for Radiance RGBE streams.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum RgbeError {
    #[error("malformed RGBE header: {0}")]
    MalformedHeader(String),
    #[error("truncated RGBE pixel data: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("RGBE resolution mismatch: {0}")]
    ResolutionMismatch(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration `{key}`: {message}")]
    Config { key: String, message: String },

    #[error(transparent)]
    Rgbe(#[from] RgbeError),

    #[error("malformed raw-float image: {0}")]
    RawFloat(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("cannot split dataset: {0}")]
    Split(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },

    #[error("numeric guard: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("adapter error: {0}")]
    Adapter(String),

    #[error("evaluation failed for `{id}`: {message}")]
    Evaluation { id: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {message}")]
    Codec { path: PathBuf, message: String },
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { key: key.into(), message: message.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
