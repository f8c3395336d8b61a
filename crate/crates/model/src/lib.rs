//! Dual-task appliance-state / injection model, baselines, training and
//! checkpoints.

pub mod baselines;
pub mod checkpoint;
pub mod dualnilm;
mod error;
mod kernels;
pub mod loss;
pub mod network;
pub mod nn;
pub mod params;
pub mod train;

pub use checkpoint::AnyModel;
pub use dualnilm::{DecoderQuery, DualNilm, ModelConfig};
pub use error::{Error, Result};
pub use network::{predict, Heads, Network, Precision, Predictions, TrainingData};
pub use train::{fit, fit_with, EpochRecord, Trace, TrainConfig};
