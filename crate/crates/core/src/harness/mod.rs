//! Experiment orchestration: configs, run directories, the comparison and
//! analysis commands, and the self-checks.

pub mod checks;
pub mod cli;
pub mod config;
pub mod run;

pub use config::ExperimentConfig;
pub use run::{compare, execute, landscape, trace, RunManifest, RunResults};
