use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Architecture or model wiring is inconsistent.
    #[error("configuration error at layer {layer}: {message}")]
    Config { layer: usize, message: String },

    /// An operation was called out of order (e.g. backward before forward).
    #[error("state error: {0}")]
    State(String),

    /// Caller-supplied value is outside the accepted domain.
    #[error("invalid input: {0}")]
    Input(String),

    #[error("format error in {path} at byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("training diverged at step {step}: loss is {loss}; weight norms per layer {layer_norms:?}")]
    Diverged {
        step: usize,
        loss: f64,
        layer_norms: Vec<(String, f64)>,
    },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn config(layer: usize, msg: impl Into<String>) -> Self {
        Error::Config {
            layer,
            message: msg.into(),
        }
    }
}
