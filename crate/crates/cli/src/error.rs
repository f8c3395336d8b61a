use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint knows appliances {checkpoint:?} but the dataset has {dataset:?}")]
    RegistryMismatch {
        checkpoint: Vec<String>,
        dataset: Vec<String>,
    },

    #[error("test window {start}..{end} overlaps training data {train_start}..{train_end}")]
    Leakage {
        start: f64,
        end: f64,
        train_start: f64,
        train_end: f64,
    },

    #[error("{0}")]
    Divergence(String),

    #[error(transparent)]
    Core(#[from] dnilm_core::Error),

    #[error(transparent)]
    Model(dnilm_model::Error),
}

impl From<dnilm_model::Error> for CliError {
    fn from(e: dnilm_model::Error) -> Self {
        match e {
            dnilm_model::Error::Divergence { .. } => CliError::Divergence(e.to_string()),
            dnilm_model::Error::Config(_) | dnilm_model::Error::UnknownPreset(_) => CliError::Usage(e.to_string()),
            other => CliError::Model(other),
        }
    }
}

impl CliError {
    /// 0 success, 1 usage, 2 data, 3 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Divergence(_) => 3,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}
