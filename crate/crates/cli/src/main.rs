//! `spurious`: runs the synthetic experiments and writes CSV/JSON results.
//!
//! Exit codes: 0 on success, 2 for configuration errors (including rejected
//! parameters and invalid models), 3 when the numerics fail on valid input.
//! `SPURIOUS_WORKERS` sets the size of the worker pool.

mod commands;
mod config;

use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::Layers;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] spurious_core::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numerical() => 3,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "spurious", version, about = "Spurious correlation experiments for high-dimensional ridge regression")]
struct Cli {
    /// Experiment configuration (JSON), layered over the built-in defaults.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Override one configuration key, e.g. `--set lambda_grid.count=10`.
    /// Values are parsed as JSON, falling back to a plain string.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Desk scale: d = 100, n = 500.
    #[arg(long, global = true)]
    desk: bool,

    /// Output directory, replacing `output_dir`.
    #[arg(long, short, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Deterministic and empirical C, L over the λ grid, plus thresholds.
    Curves,
    /// C, L while ev_max_yy or beta moves at fixed λ.
    Simplicity,
    /// Random-features equivalence ladder and spurious covariance.
    RfEquiv,
    /// τ, C^Σ, L^Σ and the bounds at a single λ, printed as JSON.
    Tau {
        #[arg(long)]
        lambda: f64,
    },
    /// Check a covariance model and print its diagnostics.
    ValidateModel {
        /// Model JSON file; the configured model when absent.
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

fn init_workers() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("SPURIOUS_WORKERS") else {
        return Ok(());
    };
    let workers: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&w| w > 0)
        .ok_or_else(|| CliError::Config(format!("SPURIOUS_WORKERS = `{raw}` is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))
}

fn run(cli: &Cli) -> Result<bool, CliError> {
    init_workers()?;
    let loaded = config::load(&Layers {
        file: cli.config.as_deref(),
        desk: cli.desk,
        overrides: &cli.overrides,
        output_dir: cli.out.as_deref(),
    })?;
    match &cli.command {
        Command::Curves => commands::curves(&loaded)?,
        Command::Simplicity => commands::simplicity(&loaded)?,
        Command::RfEquiv => commands::rf_equiv(&loaded)?,
        Command::Tau { lambda } => commands::tau(&loaded, *lambda, &mut io::stdout().lock())?,
        Command::ValidateModel { model } => {
            return commands::validate_model(&loaded, model.as_deref(), &mut io::stdout().lock());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("spurious: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
