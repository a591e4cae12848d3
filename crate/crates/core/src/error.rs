use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A line of an alignment file could not be decoded.
    #[error("alignment line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Input violates a documented invariant (ordering, duration, labels, ...).
    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    /// A value lies outside the domain of the function (zero norm, zero column, ...).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("capacity exceeded: {what} has {got} tokens, maximum is {max}")]
    Capacity { what: String, got: usize, max: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    /// Checkpoint or raw-array payload that cannot be decoded.
    #[error("decode error: {0}")]
    Decode(String),

    #[error("version mismatch: archive has version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("child process failed: {0}")]
    Subprocess(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad inputs rather than by the runtime.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Validation(_)
                | Error::Shape(_)
                | Error::EmptyInput(_)
                | Error::Domain(_)
                | Error::Capacity { .. }
                | Error::Config(_)
                | Error::Usage(_)
        )
    }
}
