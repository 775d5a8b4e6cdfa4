//! Experiment runner: configuration, scenario simulation, estimation runs,
//! evaluation and the benchmark suite.

pub mod bench;
pub mod bundle;
pub mod calibration;
pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod scenario;

pub use config::ExperimentConfig;
pub use error::CliError;
