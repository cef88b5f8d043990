use std::path::PathBuf;

use thiserror::Error;

use crate::checkpoint::Checkpoint;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("validation error: {0}")]
    Validation(String),

    /// A forward pass produced NaN or infinite values.
    #[error("non-finite values produced at stage `{stage}`")]
    NonFinite { stage: String },

    #[error("no manifest found in {0}")]
    NoManifest(PathBuf),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),

    /// Training produced a NaN loss; the last parameters that gave a finite
    /// loss are carried along so the caller can persist them.
    #[error("training diverged at step {step} (total loss {loss})")]
    Diverged {
        step: usize,
        loss: f64,
        last_good: Box<Checkpoint>,
    },

    #[error("unknown op `{name}`; registered ops: {registered}")]
    UnknownOp { name: String, registered: String },

    #[error("finite difference failed: f is not finite at coordinate {index} ({direction} perturbation)")]
    FiniteDiff {
        index: usize,
        direction: &'static str,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
