//! Configuration, orchestration and result files for the `fbsde` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod emit;
pub mod error;

pub use config::{load_config, RunConfig};
pub use error::{CliError, Result};
