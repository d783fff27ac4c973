use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("statistics error: {0}")]
    Statistics(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("format error at entry {entry}: {message}")]
    Format { entry: usize, message: String },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("optimizer error: {0}")]
    Optimizer(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by invalid user input rather than by a failing run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Parameter(_) | Error::Manifest(_) | Error::Format { .. }
        )
    }
}
