use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the engine and the pipeline around it.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents that do not fit the operation's shape rule.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Invalid hyperparameters or configuration values.
    #[error("config error: {0}")]
    Config(String),

    /// An API used out of order, e.g. backward without a forward trace.
    #[error("usage error: {0}")]
    Usage(String),

    /// Malformed binary input.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    /// A bad row in a dataset manifest.
    #[error("manifest error at row {row}: {message}")]
    Manifest { row: usize, message: String },

    /// Data that is well-formed but unusable (missing patients, no slices, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite values during training.
    #[error("numerical abort at epoch {epoch}, batch {batch}: {detail}")]
    Numerical { epoch: usize, batch: usize, detail: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class: 2 usage/config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape { .. } | Error::Config(_) | Error::Usage(_) | Error::Io { .. } => 2,
            Error::Parse { .. } | Error::Manifest { .. } | Error::Data(_) => 3,
            Error::Numerical { .. } => 4,
        }
    }
}
