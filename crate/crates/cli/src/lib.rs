//! Experiment front-end for the fedre simulator: configuration, the
//! `gen-data` / `train` / `attack` / `report` subcommands, and their outputs.
//!
//! Exit codes: 0 success, 1 validation or input error, 2 numeric failure.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;

pub use config::{parse_config, Assignment, ExperimentConfig};
pub use error::{CliError, CliResult};
