//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input at a known line of a corpus or embedding file.
    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },

    /// A tag sequence violates the BIO scheme.
    #[error("sentence {sentence}: invalid BIO at token {position}: {message}")]
    Bio {
        sentence: String,
        position: usize,
        message: String,
    },

    /// Incompatible tensor shapes fed to a graph operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Invalid configuration value or combination.
    #[error("config: {0}")]
    Config(String),

    /// Corrupt or truncated binary container (checkpoint / embedding store).
    #[error("container: {0}")]
    Container(String),

    /// A precondition of an operation does not hold.
    #[error("{0}")]
    Invalid(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
