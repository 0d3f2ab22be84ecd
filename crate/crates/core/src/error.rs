use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
///
/// [`Error::category`] collapses them into the coarse buckets the command-line
/// front end turns into exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("missing file {path}")]
    MissingFile { path: PathBuf },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt bag header: {0}")]
    CorruptHeader(String),

    #[error("payload shorter than header claims: expected {expected} bytes, found {found}")]
    PayloadTruncated { expected: usize, found: usize },

    #[error("shape mismatch between header and payload: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unknown patient `{0}`")]
    UnknownPatient(String),

    #[error("unknown extractor `{0}`")]
    UnknownExtractor(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("inputs must be unit-norm: {0}")]
    NotNormalized(String),

    #[error("stratification failure: {0}")]
    Stratification(String),

    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse failure classes, stable across error variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    MissingFile,
    Divergence,
    Other,
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile { path }
        } else {
            Error::Io { path, source }
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::InvalidConfig { .. } => ErrorCategory::Config,
            Error::MissingFile { .. } => ErrorCategory::MissingFile,
            Error::Divergence(_) => ErrorCategory::Divergence,
            _ => ErrorCategory::Other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
