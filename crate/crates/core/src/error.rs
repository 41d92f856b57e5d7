use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("batch too small: batch norm needs at least 2 samples in training mode, got {0}")]
    BatchTooSmall(usize),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("distribution error: {0}")]
    Distribution(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("gradient descent diverged: {0}")]
    Divergence(String),

    #[error("gradient descent did not reach tolerance after {0} iterations")]
    NotConverged(usize),

    #[error("empty measurement: {0}")]
    EmptyMeasurement(String),

    #[error("invalid network spec: {0}")]
    Spec(String),

    #[error("format error in {path} at byte {offset}: {msg}")]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        layer_norms: Vec<(String, f64)>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
