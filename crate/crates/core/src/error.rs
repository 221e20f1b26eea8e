use std::path::PathBuf;

/// Errors raised anywhere in the emotion-recognition pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left} vs {right}")]
    Dimension {
        op: String,
        left: String,
        right: String,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt file at byte offset {offset}: {reason}")]
    Corruption { offset: u64, reason: String },

    #[error("incompatible checkpoint: expected {expected}, found {found}")]
    Incompatible { expected: String, found: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("gradient oracle: {0}")]
    Oracle(String),

    #[error("degenerate embedding: {0} has zero norm")]
    DegenerateEmbedding(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: impl Into<String>, left: impl ToString, right: impl ToString) -> Self {
        Error::Dimension {
            op: op.into(),
            left: left.to_string(),
            right: right.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
