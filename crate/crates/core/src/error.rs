use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("lookup error: index {index} outside [0, {max}]")]
    Lookup { index: usize, max: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("line {line}: unknown behavior token {token:?}")]
    UnknownBehavior { line: usize, token: String },

    #[error("dataset is empty after filtering")]
    EmptyDataset,

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bad {kind} file: {msg}")]
    Format { kind: &'static str, msg: String },

    #[error("config digest mismatch: artifact was produced with {found}, current config is {expected}")]
    DigestMismatch { expected: String, found: String },

    /// Non-finite loss during training. `dump` describes the offending batch.
    #[error("non-finite {component} loss at step {step}\n{dump}")]
    NonFiniteLoss {
        step: u64,
        component: &'static str,
        dump: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
