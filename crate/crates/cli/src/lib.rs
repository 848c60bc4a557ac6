//! Library side of the `bgm` binary: run configuration and the five
//! subcommands, usable from tests without spawning a process.

pub mod commands;
pub mod config;

pub use commands::{
    decode, encode, evaluate_cmd, generate_cmd, train_cmd, CliError, CliResult, EvaluationReport, GenerateReport,
    MetricMean, TrainReport,
};
pub use config::RunConfig;
