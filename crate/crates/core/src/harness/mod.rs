//! Experiment harness: configs, artifacts, pipeline stages and the CLI.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod pgm;
pub mod pipeline;
pub mod report;

pub use config::{load_config, parse_config, DgsSettings, ExperimentConfig};
pub use pipeline::{Lab, Suite, SweepCell};
