use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected \"CMF1\", found {found:02x?}")]
    BadMagic { found: Vec<u8> },

    #[error(
        "truncated CMF1 payload: header promises {expected} values, found {found} bytes of payload"
    )]
    Truncated { expected: usize, found: usize },

    #[error("CMF1 file has {extra} trailing bytes after the payload")]
    TrailingData { extra: usize },

    #[error("non-finite value {value} at row {row}, col {col}")]
    NonFinite { row: usize, col: usize, value: f64 },

    #[error("row {row} has zero norm and cannot be normalized")]
    DegenerateRow { row: usize },

    #[error("class {class:?} has {available} train rows, {requested} requested")]
    InsufficientShots {
        class: String,
        available: usize,
        requested: usize,
    },

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("outside the open simplex: {0}")]
    Domain(String),

    #[error("numerical failure in {term}: {detail}")]
    Numerical { term: String, detail: String },

    #[error("training aborted at epoch {epoch}, step {step}: {source}")]
    TrainingAborted {
        epoch: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("synthetic generation failed: {0}")]
    Generation(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn numerical(term: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerical {
            term: term.into(),
            detail: detail.into(),
        }
    }

    /// True for failures of the arithmetic itself rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical { .. } | Error::TrainingAborted { .. }
        )
    }
}
