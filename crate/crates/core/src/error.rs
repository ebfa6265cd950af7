use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("path generation failed after {attempts} attempts")]
    GenerationFailed { attempts: usize },

    #[error("unknown architecture {0:?}")]
    UnknownArch(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("malformed dataset at {path}: {detail}")]
    Dataset { path: PathBuf, detail: String },

    #[error("training diverged at step {step} (last good checkpoint: {last_good:?})")]
    Diverged { step: usize, last_good: Option<PathBuf> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("png: {0}")]
    Png(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    /// True for non-finite values, including ones reported from inside a
    /// named stage.
    pub fn is_non_finite(&self) -> bool {
        match self {
            Error::NonFinite { .. } => true,
            Error::Stage { source, .. } => source.is_non_finite(),
            _ => false,
        }
    }

    /// Wraps the error with the name of the computation stage that produced it.
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage { stage: stage.into(), source: Box::new(self) }
    }
}

impl From<png::EncodingError> for Error {
    fn from(e: png::EncodingError) -> Self {
        Error::Png(e.to_string())
    }
}

impl From<png::DecodingError> for Error {
    fn from(e: png::DecodingError) -> Self {
        Error::Png(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
