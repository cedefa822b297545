//! Config-driven experiment runner for `inclearn`: run plans, result files
//! and summary tables.

pub mod config;
pub mod report;
pub mod runner;

pub use config::{ConfigError, ExperimentConfig};
pub use report::report;
pub use runner::{plan, resolve_output_dir, run, RunOutcome};
