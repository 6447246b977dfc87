use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A coupling tree, corruption spec, model spec or config violates its contract.
    #[error("specification error: {0}")]
    Spec(String),

    #[error("{what} index {index} out of range (len {len})")]
    OutOfRange {
        what: String,
        index: usize,
        len: usize,
    },

    /// Source files are missing from the data root.
    #[error("data not available: {path}: {hint}")]
    DataUnavailable { path: PathBuf, hint: String },

    /// Data exists but cannot satisfy the request (too few images, bad file).
    #[error("data error: {0}")]
    Data(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error(
        "training diverged at epoch {epoch}, step {step}: loss {loss} (lr {lr}); last finite loss {last_finite:?}"
    )]
    Divergence {
        epoch: usize,
        step: usize,
        loss: f32,
        lr: f64,
        last_finite: Option<f32>,
    },

    #[error("config error in {path}: {message}")]
    Config { path: PathBuf, message: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn spec(msg: impl Into<String>) -> Self {
        Error::Spec(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn undefined(msg: impl Into<String>) -> Self {
        Error::UndefinedMetric(msg.into())
    }
}
