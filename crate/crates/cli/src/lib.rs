//! Experiment front end for `orca-core`: TOML configs, the `generate`,
//! `train`, `eval` and `sweep` commands, and deterministic artifact output.

pub mod commands;
pub mod config;
pub mod error;
pub mod metrics;

pub use commands::{
    build_dataset, cmd_eval, cmd_generate, cmd_sweep, cmd_train, RunArtifacts, SweepOutput,
};
pub use config::{parse_config, parse_config_with, ExperimentConfig, MetricsFormat, Override};
pub use error::{CliError, CliResult};
pub use metrics::{emit_metrics, format_sig6};
