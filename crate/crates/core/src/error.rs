use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("tape is stale: recorded against parameter generation {tape}, network is at {net}")]
    StaleTape { tape: u64, net: u64 },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: usize },

    #[error("non-finite {which} loss at step {step}")]
    NonFiniteLoss { step: usize, which: &'static str },

    #[error("non-finite {which} update at step {step}: {detail}")]
    NonFiniteUpdate {
        step: usize,
        which: &'static str,
        detail: String,
    },

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid value for `{key}`: {reason}")]
    InvalidConfig { key: String, reason: String },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("bad checkpoint {path}: {reason}")]
    BadCheckpoint { path: PathBuf, reason: String },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn config(key: &str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            key: key.to_string(),
            reason: reason.into(),
        }
    }

    /// True when a training run blew up numerically.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::NonFiniteGradient { .. }
                | Error::NonFiniteLoss { .. }
                | Error::NonFiniteUpdate { .. }
        )
    }

    /// True for errors caused by user input rather than a failing run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig { .. }
                | Error::UnknownKey(_)
                | Error::Parse { .. }
                | Error::MissingFile(_)
                | Error::BadCheckpoint { .. }
        )
    }
}
