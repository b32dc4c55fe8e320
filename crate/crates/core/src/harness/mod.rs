//! Configuration, orchestration and reporting of experiment runs.

pub mod ablate;
pub mod config;
pub mod report;
pub mod run;

pub use config::{ConfigError, RunConfig};
pub use run::{run, run_with_provider, RunError, RunOutcome};
