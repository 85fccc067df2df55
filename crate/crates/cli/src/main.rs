//! `ctact`: error tables, trace checks, timing samples, attack simulations
//! and threshold derivations for the constant-time activations.
//!
//! Exit codes: 0 success, 1 assertion failure, 2 usage error, 3 runtime error.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "CTACT_OUT_DIR";

pub const EXIT_ASSERTION: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

/// Outcome of a command that ran to completion.
pub enum Status {
    Ok,
    Failed(Vec<String>),
}

#[derive(Debug, Parser)]
#[command(name = "ctact", version, about = "Constant-time activation laboratory")]
pub struct Cli {
    /// Seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Record format for tabular artifacts.
    #[arg(long, global = true, value_parser = ["csv", "json"])]
    pub format: Option<String>,
    /// Output directory (default: $CTACT_OUT_DIR, else stdout).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overwrite existing output files.
    #[arg(long, global = true)]
    pub force: bool,
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct GridArgs {
    /// Closed input interval.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], allow_negative_numbers = true)]
    pub interval: Option<Vec<f64>>,
    /// Grid spacing.
    #[arg(long)]
    pub step: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Error metrics of the protected activations against their references.
    Errors {
        #[command(flatten)]
        grid: GridArgs,
        /// Comma-separated nonlinear kinds (default: sigmoid,tanh,gelu,swish).
        #[arg(long)]
        kinds: Option<String>,
    },
    /// Operation-trace uniformity and length alignment.
    Traces {
        #[command(flatten)]
        grid: GridArgs,
        /// Comma-separated protected kinds (default: all five).
        #[arg(long)]
        kinds: Option<String>,
        /// Comma-separated unprotected kinds to trace as well.
        #[arg(long)]
        unprotected: Option<String>,
    },
    /// Per-input timing samples and summary statistics.
    Bench {
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long)]
        kinds: Option<String>,
        /// protected, unprotected or both.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        reps: Option<u32>,
        /// host (monotonic clock), trace (op count) or model (device cycles).
        #[arg(long)]
        clock: Option<String>,
        /// Delay added in model-clock mode (see `attack --delay`).
        #[arg(long, allow_hyphen_values = true)]
        delay: Option<String>,
    },
    /// Profiled Gaussian-template timing attack.
    Attack {
        /// Comma-separated candidate classes (default: relu,sigmoid,tanh).
        #[arg(long)]
        classes: Option<String>,
        #[arg(long)]
        n_prof: Option<usize>,
        #[arg(long)]
        n_max: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
        /// desync or constant-time.
        #[arg(long)]
        countermeasure: Option<String>,
        /// calibrated, none, uniform:LO:HI or gaussian:MEAN:STD (microseconds).
        #[arg(long, allow_hyphen_values = true)]
        delay: Option<String>,
        /// Input-dependent jitter of the unprotected latencies, in cycles.
        #[arg(long)]
        jitter_cycles: Option<u32>,
        /// Trials per true class whose score histories are written.
        #[arg(long)]
        history_trials: Option<usize>,
    },
    /// Saturation thresholds: solved, derived and empirical values.
    Thresholds {
        /// Residual tolerance of the tanh balancing solver.
        #[arg(long, allow_negative_numbers = true)]
        tolerance: Option<f64>,
        /// Also sweep the GELU and Swish thresholds.
        #[arg(long)]
        sweep: bool,
        #[command(flatten)]
        grid: GridArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Failed(reasons)) => {
            for r in reasons {
                eprintln!("assertion failed: {r}");
            }
            ExitCode::from(EXIT_ASSERTION)
        }
        Err(e) => {
            let label = if matches!(e, CliError::Usage(_)) { "usage error" } else { "error" };
            eprintln!("{label}: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
