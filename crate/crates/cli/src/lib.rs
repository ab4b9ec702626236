//! Experiment orchestration for the `corro` command-line tool.

pub mod artifacts;
pub mod commands;
pub mod config;

pub use config::ExperimentConfig;
