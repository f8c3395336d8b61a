//! Experiment runner: builds datasets, trains and scores models, runs
//! cross-validation and summarizes results. `main.rs` is a thin clap layer
//! over [`commands`].

pub mod commands;
pub mod config;
mod error;
pub mod evaluate;
pub mod plots;
pub mod provenance;

pub use error::{CliError, Result};

/// Worker count from `DNILM_THREADS`, defaulting to the machine's
/// parallelism.
pub fn thread_budget() -> Result<usize> {
    match std::env::var("DNILM_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Usage(format!("DNILM_THREADS must be a positive integer, got '{v}'"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}
