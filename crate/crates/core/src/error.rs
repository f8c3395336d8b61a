use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid value for {field}: {reason}")]
    InvalidValue { field: &'static str, reason: String },

    #[error("series is empty")]
    EmptySeries,

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("irradiance ends at {irradiance_end}s but the target grid runs to {grid_end}s")]
    CoverageGap { irradiance_end: f64, grid_end: f64 },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("{path}:{line}: timestamp {time} is not after the previous one ({previous})")]
    NonMonotone {
        path: PathBuf,
        line: usize,
        time: f64,
        previous: f64,
    },

    #[error("series of length {len} is shorter than the window length {window}")]
    TooShort { len: usize, window: usize },

    #[error("test span of {span} samples does not fit a dataset of {len} samples")]
    SpanExceedsDataset { span: usize, len: usize },

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("bad dataset file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidValue {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
