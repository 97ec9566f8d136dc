//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by the authentication toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("empty recording: {0}")]
    EmptyRecording(PathBuf),

    #[error("truncated raw IQ file {path}: {len} bytes is not a multiple of 8")]
    TruncatedRawIq { path: PathBuf, len: u64 },

    #[error("non-finite sample at index {index}{}", context_suffix(.context))]
    NonFiniteSample { index: usize, context: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("device {device_id}: {msg}")]
    Device { device_id: u32, msg: String },

    #[error("non-finite activations in layer {layer}")]
    NonFiniteActivation { layer: String },

    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("all learning rates in the grid diverged")]
    AllRatesDiverged,

    #[error("calibration tables disagree: {0}")]
    CalibrationMismatch(String),

    #[error("missing dataset for domain {0}")]
    MissingDomain(String),

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn context_suffix(context: &str) -> String {
    if context.is_empty() {
        String::new()
    } else {
        format!(" in {context}")
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
