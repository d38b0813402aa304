//! Experiment plumbing behind the `gin` binary.

pub mod commands;
pub mod config;
pub mod selftest;

pub use commands::{
    analyze, full_experiment, gen_data, train, AttemptSummary, ExperimentSummary, TrainRequest,
    TrainResult,
};
pub use config::{config_keys, config_keys_help, ExperimentConfig, Expectation, Preset};
pub use selftest::{selftest, InjectFault, SelftestReport};

pub const EXIT_OK: u8 = 0;
pub const EXIT_ACCEPTANCE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] gin_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numeric() => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
