use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SevenError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SevenError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{0}: backward called before forward")]
    BackwardBeforeForward(&'static str),

    #[error("format error in {context} at byte offset {offset}: {message}")]
    Format {
        context: String,
        offset: u64,
        message: String,
    },

    #[error("non-finite loss at epoch {epoch}, batch {batch}: total={total} discriminative={discriminative} generative={generative}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        total: f64,
        discriminative: f64,
        generative: f64,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl SevenError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        SevenError::InvalidArgument(msg.into())
    }

    pub(crate) fn format(context: impl Into<String>, offset: u64, message: impl Into<String>) -> Self {
        SevenError::Format {
            context: context.into(),
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SevenError::Io {
            path: path.into(),
            source,
        }
    }
}
