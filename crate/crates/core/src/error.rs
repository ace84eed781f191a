use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("state corruption: {0}")]
    StateCorruption(String),

    #[error("numeric domain error at step {step}: {msg}")]
    NumericDomain { step: usize, msg: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("did not converge: {0}")]
    Convergence(String),

    #[error("cheirality violation: {0}")]
    Cheirality(String),

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("{path}:{line}: parse error: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
