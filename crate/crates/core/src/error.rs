use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument was outside the domain of the operation (non-finite logit,
    /// singular covariance, ...).
    #[error("rejected input: {0}")]
    RejectedInput(String),

    /// Caller violated a precondition (shape mismatch, out-of-bounds prompt, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numerical overflow: {0}")]
    NumericalOverflow(String),

    #[error("degenerate prototype: prompt embeddings average to the zero vector")]
    DegeneratePrototype,

    #[error("sample generation failed: {0}")]
    Generation(String),

    /// Configuration is well-formed but semantically invalid.
    #[error("invalid configuration: {0}")]
    Validation(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Process exit status for the CLI: 2 for IO and parse failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Json { .. } => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
