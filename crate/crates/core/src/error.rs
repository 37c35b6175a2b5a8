use std::path::PathBuf;

use thiserror::Error;

/// Shape of a matrix as `(rows, cols)`.
pub type Shape = (usize, usize);

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, left is {left:?}, right is {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("{op}: row {row} has norm {norm:e}, below epsilon {eps:e}")]
    DegenerateRow {
        op: &'static str,
        row: usize,
        norm: f64,
        eps: f64,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("total conflict between mass functions (K = {conflict})")]
    TotalConflict { conflict: f64 },

    #[error("non-finite loss in term {term}")]
    Divergence { term: &'static str },

    #[error("corrupt data file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("format version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("target id {0} is not present in the index")]
    MissingTarget(usize),

    #[error("duplicate candidate id {0}")]
    DuplicateId(usize),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
