//! Experiment harness: configuration files, dataset generation, training
//! stages, evaluation sweeps and report artifacts.

pub mod config;
pub mod experiment;
pub mod plot;

pub use config::{ExperimentConfig, Method, SystemCell, ThresholdPolicy};
pub use experiment::{MetricsReport, MetricsRow};
