use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("geometry: {0}")]
    Geometry(String),

    #[error("configuration: {0}")]
    Config(String),

    /// Malformed input data; `line` is 1-based when known.
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },

    #[error("data: {0}")]
    Data(String),

    #[error("numerical fault: {0}")]
    Numerical(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {message}")]
    Divergence { epoch: usize, batch: usize, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(path: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), line, message: message.into() }
    }

    /// True for faults of the numerical kind (non-finite parameters, divergence,
    /// singular systems), which the command line reports with a distinct exit code.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_) | Error::Divergence { .. })
    }
}
