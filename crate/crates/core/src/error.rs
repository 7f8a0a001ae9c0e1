use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch { expected: Vec<usize>, actual: Vec<usize> },

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("unknown domain `{0}`")]
    UnknownDomain(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable code, used by the command-line front end.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "E_INVALID_ARGUMENT",
            Error::ShapeMismatch { .. } => "E_SHAPE_MISMATCH",
            Error::SchemaMismatch(_) => "E_SCHEMA_MISMATCH",
            Error::UnknownDomain(_) => "E_UNKNOWN_DOMAIN",
            Error::EmptyDataset(_) => "E_EMPTY_DATASET",
            Error::InsufficientSamples(_) => "E_INSUFFICIENT_SAMPLES",
            Error::Format { .. } => "E_FORMAT",
            Error::Io { .. } => "E_IO",
            Error::Json(_) => "E_JSON",
            Error::Csv(_) => "E_CSV",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
