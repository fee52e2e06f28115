//! Experiment orchestration for the `biofuse` command-line tool.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod experiment;
pub mod report;

pub use config::{ExperimentConfig, Overrides};

/// Process exit status for an error: 2 for configuration problems, 1 otherwise.
pub fn exit_code(e: &biofuse::Error) -> i32 {
    if e.is_config() {
        2
    } else {
        1
    }
}
