//! Crate-wide error type.

use crate::lexicon::{EntityClass, EntitySpan};
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("{path}:{line}: duplicate term '{term}'")]
    DuplicateTerm {
        path: String,
        line: usize,
        term: String,
    },

    #[error("{path}:{line}: unknown entity class '{class}' (expected cannabis|depression)")]
    UnknownClass {
        path: String,
        line: usize,
        class: String,
    },

    #[error("{path}:{line}: unknown label '{label}' (expected Reason|Effect|Addiction|Ambiguous)")]
    UnknownLabel {
        path: String,
        line: usize,
        label: String,
    },

    #[error("{path}:{line}: duplicate id '{id}'")]
    DuplicateId {
        path: String,
        line: usize,
        id: String,
    },

    #[error("{path}:{line}: {source}")]
    Json {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error("invalid span: {0}")]
    InvalidSpan(String),

    #[error("overlapping spans {a:?} and {b:?}")]
    OverlappingSpans {
        a: (usize, usize),
        b: (usize, usize),
    },

    #[error("no {class} entity located (spans found so far: {located:?})")]
    MissingEntity {
        class: EntityClass,
        located: Vec<EntitySpan>,
    },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid split ratios: {0}")]
    InvalidRatios(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown config key '{key}' ({source_name}:{line})")]
    UnknownKey {
        key: String,
        source_name: String,
        line: usize,
    },

    #[error("external context has no entry for id '{0}'")]
    MissingId(String),

    #[error("alignment error for id '{id}': {msg}")]
    Alignment { id: String, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    /// Wrap an io error with the path it concerns.
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

/// Read a file to string, attaching the path to any io error.
pub fn read_to_string(path: impl AsRef<std::path::Path>) -> Result<String> {
    std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path, e))
}

/// Write bytes to a file, attaching the path to any io error.
pub fn write_bytes(path: impl AsRef<std::path::Path>, bytes: &[u8]) -> Result<()> {
    std::fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path, e))
}
