//! Command-line experiment runner for `msa-core`.
//!
//! [`run`] parses arguments, loads and resolves the configuration, runs one
//! command inside a rayon pool of the requested size and writes the CSV
//! tables and `summary.json` to the output directory.

pub mod commands;
pub mod config;
pub mod report;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use thiserror::Error;

pub use commands::Outcome;
pub use config::Config;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_FAILED: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Core(#[from] msa_core::Error),
    #[error("i/o: {0}")]
    Io(String),
    #[error("{context}: {source}")]
    Step {
        context: &'static str,
        source: msa_core::Error,
    },
}

pub(crate) trait Context<T> {
    fn context(self, what: &'static str) -> Result<T, CliError>;
}

impl<T> Context<T> for msa_core::Result<T> {
    fn context(self, what: &'static str) -> Result<T, CliError> {
        self.map_err(|source| CliError::Step { context: what, source })
    }
}

#[derive(Debug, Parser)]
#[command(name = "msa", version, about = "Successive-approximation experiments for stochastic control")]
pub struct Cli {
    /// TOML configuration (or the JSON `config` object of a previous summary).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Root seed; overrides `simulation.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; overrides `simulation.workers`.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Fill the `elapsed_s` column. Off by default so outputs are reproducible.
    #[arg(long, global = true)]
    pub timing: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Estimate the assumption constants and compare them with the ledger.
    Validate,
    /// Iterate the MSA map from the midpoint control.
    RunMsa,
    /// Measure one-step contraction ratios over random control pairs.
    ContractionTest,
    /// Check the state and adjoint estimates on paired runs.
    VerifyBounds,
    /// Compare the converged MSA control with the dynamic-programming oracle.
    OracleCompare,
    /// Print the constants ledger.
    Constants,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::RunMsa => "run-msa",
            Command::ContractionTest => "contraction-test",
            Command::VerifyBounds => "verify-bounds",
            Command::OracleCompare => "oracle-compare",
            Command::Constants => "constants",
        }
    }
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(outcome) => {
            print!("{}", outcome.stdout);
            match outcome.verified {
                Some(false) => EXIT_FAILED,
                _ => EXIT_OK,
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

/// Loads the configuration, applies flag overrides, runs the command and
/// writes its outputs.
pub fn execute(cli: &Cli) -> Result<Outcome, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config <path> is required".into()))?;
    let mut cfg = Config::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.simulation.seed = seed;
    }
    if let Some(w) = cli.workers {
        cfg.simulation.workers = w;
    }
    let cfg = cfg.resolve()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.simulation.workers)
        .build()
        .map_err(|e| CliError::Config(format!("worker pool: {e}")))?;
    let outcome = pool.install(|| commands::dispatch(cli.command, &cfg, cli.timing))?;
    report::write_outputs(&cli.out, cli.command, &cfg, &outcome)?;
    Ok(outcome)
}
