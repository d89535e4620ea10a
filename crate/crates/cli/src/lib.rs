//! Experiment runner: TOML configs, pretraining, multi-round self-play,
//! property suites, sampling and plot data.

pub mod cli;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod verify;

pub use error::{CliError, CliResult};
