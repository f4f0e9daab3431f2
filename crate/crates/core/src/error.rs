use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SdcError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SdcError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("index {index} out of range for {what} of size {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value at {location}")]
    NonFinite { location: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("sample pool for {tag:?} exhausted after {size} draws")]
    PoolExhausted { tag: String, size: usize },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("unsupported plot: {0}")]
    UnsupportedPlot(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SdcError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SdcError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input or configuration rather than
    /// a failure while running.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            SdcError::Config(_) | SdcError::Dimension { .. } | SdcError::Schema(_) | SdcError::UnsupportedPlot(_)
        )
    }
}
