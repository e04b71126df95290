//! Command-line front end for the `lmscnet` crate.
//!
//! Every subcommand is a plain function taking its parsed arguments, so the
//! binary in `main.rs` is only argument parsing and exit-code mapping.
//!
//! Exit codes: 0 success, 1 configuration or checkpoint error, 2 data error,
//! 3 non-finite loss during training.

pub mod args;
mod commands;
pub mod config;
pub mod ply;

use std::fmt;

pub use args::{
    BenchArgs, Cli, Command, EvalArgs, ExportPlyArgs, InferArgs, MakeSyntheticArgs, TrainArgs,
};
pub use commands::{
    cmd_bench, cmd_eval, cmd_export_ply, cmd_infer, cmd_make_synthetic, cmd_train, run, run_args,
    TrainRun,
};
pub use config::RunConfig;

pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// An error together with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: lmscnet::Error,
}

impl CliError {
    /// Reclassify as a configuration or checkpoint error.
    pub fn config(error: lmscnet::Error) -> Self {
        CliError {
            code: EXIT_CONFIG,
            error,
        }
    }

    /// Reclassify as a data error, keeping numerical aborts apart.
    pub fn data(error: lmscnet::Error) -> Self {
        match error {
            e @ lmscnet::Error::NonFinite { .. } => e.into(),
            error => CliError {
                code: EXIT_DATA,
                error,
            },
        }
    }
}

impl From<lmscnet::Error> for CliError {
    fn from(error: lmscnet::Error) -> Self {
        use lmscnet::Error::*;
        let code = match &error {
            Config(_) | Format(_) | Io { .. } => EXIT_CONFIG,
            Data(_) | Dimension { .. } | Geometry { .. } => EXIT_DATA,
            NonFinite { .. } => EXIT_NUMERIC,
        };
        CliError { code, error }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for CliError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
