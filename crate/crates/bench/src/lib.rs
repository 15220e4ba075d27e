//! Experiment harness for spinal and baseline networks: declarative configs,
//! reference architectures, and reproduction runs with CSV/JSON reporting.

pub mod config;
pub mod equivalence;
pub mod error;
pub mod presets;
pub mod reproduce;
pub mod run;

pub use config::ExperimentConfig;
pub use error::{BenchError, Result};
