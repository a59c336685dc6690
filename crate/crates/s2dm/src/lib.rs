//! File formats, configuration, training loops and subcommands around the
//! `s2dm-core` library.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod fsutil;
pub mod pgm;
pub mod report;
pub mod train;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
