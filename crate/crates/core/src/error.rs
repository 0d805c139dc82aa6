use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TfecError>;

#[derive(Debug, Error)]
pub enum TfecError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unsupported corpus: {0}")]
    UnsupportedCorpus(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("non-finite loss at epoch {epoch}: {detail}")]
    NonFiniteLoss { epoch: usize, detail: String },

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", .path.display())]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<TfecError>,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl TfecError {
    pub fn config(msg: impl Into<String>) -> Self {
        TfecError::Config(vec![msg.into()])
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        TfecError::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit code: 1 for numeric failures, 2 for I/O, parse and
    /// configuration errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            TfecError::Numeric(_) | TfecError::NonFiniteLoss { .. } => 1,
            TfecError::InFile { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}
