//! Experiment runner for the `noisyfed` simulator: JSON configs, metrics
//! CSVs, sweeps, bound reports and power comparisons.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod metrics;

pub use config::ExperimentConfig;
pub use error::CliError;
