use std::path::PathBuf;

use thiserror::Error;
use ttadapt_tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: malformed file at byte {offset}: {reason}", path.display())]
    Format {
        path: PathBuf,
        offset: usize,
        reason: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Domain(String),
    #[error("unsupported geometry: {0}")]
    Geometry(String),
    #[error("metric undefined: {0}")]
    Metric(String),
    #[error("non-finite {what} loss after {} finite steps", trace.len())]
    NonFinite { what: &'static str, trace: Vec<f64> },
    #[error("{0}")]
    Data(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end: 2 for data and
    /// format problems, 3 for numerical failure, 1 for everything the caller
    /// asked for incorrectly.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } => 3,
            Error::Io { .. } | Error::Format { .. } | Error::Data(_) => 2,
            Error::Tensor(TensorError::NonFinite(_)) => 3,
            Error::Tensor(_) | Error::Geometry(_) | Error::Metric(_) => 2,
            Error::Config(_) | Error::Domain(_) => 1,
        }
    }
}
