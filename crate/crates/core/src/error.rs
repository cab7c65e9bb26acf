use std::path::PathBuf;

use thiserror::Error;

use crate::checkpoint::CheckpointError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// A caller broke an API contract, e.g. backward on a non-scalar.
    #[error("contract error: {0}")]
    Contract(String),

    #[error("{0} is disabled in this network configuration")]
    Disabled(&'static str),

    #[error("non-finite {component} loss (epoch {epoch}, batch {batch})")]
    NonFinite {
        component: &'static str,
        epoch: usize,
        batch: usize,
    },

    #[error("format error in {file}{}: {message}", line.map(|l| format!(" line {l}")).unwrap_or_default())]
    Format {
        file: PathBuf,
        line: Option<usize>,
        message: String,
    },

    #[error("missing image file {0}")]
    MissingImage(PathBuf),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
