//! Experiment runner for `glevy-core`: loads a TOML experiment file, runs
//! the experiments in order and writes CSV reports.

pub mod config;
pub mod corpus;
pub mod error;
pub mod oracles;
pub mod report;
pub mod runner;

pub use config::{load_config, parse_config, ExperimentConfig};
pub use error::CliError;
pub use report::{emit_csv, RunReport};
pub use runner::{run, RunOptions};
