use std::path::PathBuf;

use segalign_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Json { path: PathBuf, message: String },
    #[error("{file}: expected {expected} bytes, found {actual}")]
    Size {
        file: String,
        expected: u64,
        actual: u64,
    },
    #[error("archive field `{field}`: {message}")]
    Validation { field: String, message: String },
    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("unknown {kind} `{name}` (known: {known})")]
    Unknown {
        kind: &'static str,
        name: String,
        known: String,
    },
    #[error("{what}: have {actual}, need at least {required}")]
    TooSmall {
        what: &'static str,
        actual: usize,
        required: usize,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("utterance `{0}` not found")]
    MissingUtterance(String),
    #[error("non-finite gradient in `{tensor}`")]
    NonFiniteGradient { tensor: String },
    #[error("non-finite loss at epoch {epoch} step {step}; last good checkpoint: {}", last_checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        last_checkpoint: Option<PathBuf>,
    },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Json {
            path: path.into(),
            message: err.to_string(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad user-supplied configuration or data
    /// rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config { .. }
                | Error::Validation { .. }
                | Error::Unknown { .. }
                | Error::Size { .. }
                | Error::Json { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
