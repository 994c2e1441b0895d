//! Experiment pipeline behind the `sts` binary: config loading, the
//! pretrain / calibrate / evaluate / ood / tune-beta stages, and reports.

pub mod config;
mod error;
pub mod pipeline;
pub mod report;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult, EXIT_DIVERGED, EXIT_FAILURE, EXIT_OK, EXIT_USAGE};
pub use pipeline::Method;
