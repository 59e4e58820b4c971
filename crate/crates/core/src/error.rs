use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch ({left:?} vs {right:?})")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{op}: expected a square matrix, got {rows}x{cols}")]
    NotSquare {
        op: &'static str,
        rows: usize,
        cols: usize,
    },

    #[error("{0}: non-finite value")]
    NonFinite(&'static str),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("malformed IDX file {path}: {message}")]
    Idx { path: PathBuf, message: String },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is {loss}; layer norms {layer_norms:?}")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
        layer_norms: Vec<f64>,
    },

    #[error("bound chain violated at x[{index}] ({stage}): {message}")]
    BoundChain {
        index: usize,
        stage: &'static str,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    /// Dimension/shape problems, as opposed to numerical or I/O failures.
    pub fn is_shape_error(&self) -> bool {
        matches!(
            self,
            Error::DimensionMismatch { .. } | Error::NotSquare { .. } | Error::InvalidNetwork(_)
        )
    }
}
