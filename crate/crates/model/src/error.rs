use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite input at window {window}, step {step}, feature {feature}")]
    NonFinite {
        window: usize,
        step: usize,
        feature: usize,
    },
    #[error("training diverged at epoch {epoch}: {reason}")]
    Divergence { epoch: usize, reason: String },
    #[error("appliance '{0}' already has a head")]
    DuplicateAppliance(String),
    #[error("unknown baseline preset '{0}'")]
    UnknownPreset(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("channel '{0}' is degenerate: fewer than two distinct values")]
    Degenerate(String),
    #[error("{k} chains need 2^{k} joint states; at most 12 chains are supported")]
    ProductSpaceTooLarge { k: usize },
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Data(#[from] dnilm_core::Error),
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
