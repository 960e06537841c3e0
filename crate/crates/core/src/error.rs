use std::path::PathBuf;

use thiserror::Error;

/// Errors produced across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("index out of range: {0}")]
    Index(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("state space too large for exact enumeration: {states} states exceeds cap {cap}")]
    OracleSize { states: u128, cap: u128 },

    #[error("unsupported in second-order differentiation: {0}")]
    Capability(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("batch norm needs at least two rows in train mode")]
    DegenerateBatch,

    #[error("query error: {0}")]
    Query(String),

    /// Carries the most recent finite checkpoint, when one exists.
    #[error("training diverged at step {step}: {reason}")]
    Divergence {
        step: usize,
        reason: String,
        last_good: Option<Box<crate::store::Artifact>>,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("version mismatch: expected {expected}, found {found}")]
    Version { expected: String, found: String },

    #[error("artifact kind mismatch: expected {expected}, found {found}")]
    Kind { expected: String, found: String },

    #[error("checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    Checksum { stored: u64, computed: u64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}
