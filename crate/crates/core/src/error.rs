use std::io;
use std::path::{Path, PathBuf};

use ndarr::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HifiError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: malformed file: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T, E = HifiError> = std::result::Result<T, E>;

impl HifiError {
    pub fn io(path: impl AsRef<Path>, source: io::Error) -> Self {
        HifiError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn format(path: impl AsRef<Path>, msg: impl Into<String>) -> Self {
        HifiError::Format {
            path: path.as_ref().to_path_buf(),
            msg: msg.into(),
        }
    }

    /// Process exit status: 2 for anything touching the filesystem, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HifiError::Io { .. } | HifiError::Format { .. } => 2,
            _ => 1,
        }
    }
}

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(HifiError::Contract(msg.into()))
}

impl From<HifiError> for TensorError {
    fn from(e: HifiError) -> Self {
        match e {
            HifiError::Tensor(t) => t,
            other => TensorError::Contract(other.to_string()),
        }
    }
}
