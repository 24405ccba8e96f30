//! Command-line harness: configuration, persistence and the experiment
//! subcommands built on the `lrla` library.

pub mod commands;
pub mod config;
pub mod output;

pub use commands::{
    cmd_cluster, cmd_compare, cmd_fit_probit, cmd_regret, cmd_simulate, cmd_train, FitInput, PolicyChoice, UsageError,
};
pub use config::{ExperimentConfig, Nhat};
pub use output::RunManifest;
