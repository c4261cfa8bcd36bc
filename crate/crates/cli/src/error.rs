use std::path::PathBuf;

use thiserror::Error;
use voxseg::{DataError, ModelError, OptimError, TensorError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("non-finite loss at epoch {epoch}, batch {batch} (volumes {ids:?})")]
    NonFiniteLoss { epoch: usize, batch: usize, ids: Vec<String> },
    #[error("optimizer: {0}")]
    Optim(#[from] OptimError),
    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 1 for failed checks and diverged training, 2 for configuration and
    /// data problems.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::NonFiniteLoss { .. } | CliError::Optim(OptimError::NonFiniteGradient { .. }) | CliError::CheckFailed(_) => 1,
            _ => 2,
        }
    }
}
