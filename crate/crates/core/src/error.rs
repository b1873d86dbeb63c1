use std::path::PathBuf;

use thiserror::Error;

use crate::data::OffError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("batch norm in train mode needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),

    #[error("points axis is empty")]
    EmptyPoints,

    #[error("packed weight cache is stale (weights at version {weights}, cache at {cache:?})")]
    StaleCache { weights: u64, cache: Option<u64> },

    #[error("forward cache does not belong to this layer state: {0}")]
    CacheMismatch(String),

    #[error("mixture state is stale: {0}")]
    StaleGmm(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        snapshot: Box<crate::train::Diagnostic>,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Off(#[from] OffError),

    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
