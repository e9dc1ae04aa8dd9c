//! Config-driven pipelines over the `jdl-core` algorithms: data generation,
//! training, evaluation, counterfactuals, sampling and reporting.

pub mod cli;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod run;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
