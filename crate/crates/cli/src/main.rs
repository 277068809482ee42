use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sloppyopt::error::Error;
use sloppyopt::hierarchical::Strategy;

mod commands;
mod config;

use config::Overrides;

const THREADS_VAR: &str = "SLOPPYOPT_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "sloppyopt",
    version,
    about = "Stiff/sloppy subspace optimization for nonlinear least squares"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one optimization and write its trace and result.
    Optimize(Common),
    /// Run a benchmark plan and write the bundle.
    Bench(Common),
    /// Write the Gauss-Newton eigenvalues at a point.
    Spectrum(PointArgs),
    /// Write parameter uncertainty intervals at a point.
    Uncertainty(PointArgs),
    /// Write the configured synthetic dataset as CSV.
    GenerateData(Common),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StrategyArg {
    Exact,
    Stochastic,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON config (a benchmark plan for `bench`).
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    /// Sketch rank for the stochastic strategy.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Simulator-call budget.
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    no_realign: bool,
}

#[derive(Debug, Args)]
struct PointArgs {
    #[command(flatten)]
    common: Common,
    /// Evaluate at `theta_final` of this result file instead of the start.
    #[arg(long)]
    result: Option<PathBuf>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            strategy: self.strategy.map(|s| match s {
                StrategyArg::Exact => Strategy::Exact,
                StrategyArg::Stochastic => Strategy::Stochastic,
            }),
            k: self.k,
            seed: self.seed,
            out: self.out.clone(),
            budget: self.budget,
            no_realign: self.no_realign,
        }
    }
}

/// A command failure and the exit code it maps to.
#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("config error: {0:#}")]
    Config(anyhow::Error),
    #[error("model failure: {0:#}")]
    Model(anyhow::Error),
}

impl Failure {
    pub fn config(msg: impl std::fmt::Display) -> Self {
        Failure::Config(anyhow::anyhow!("{msg}"))
    }

    pub fn model(msg: impl std::fmt::Display) -> Self {
        Failure::Model(anyhow::anyhow!("{msg}"))
    }

    pub fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Model(_) => 3,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Simulation(_)
            | Error::NotSymmetric(_)
            | Error::ZeroSpectrum
            | Error::EmptyBasis => Failure::Model(e.into()),
            _ => Failure::Config(e.into()),
        }
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| {
            Failure::config(format!(
                "{THREADS_VAR} must be a positive integer, got {value:?}"
            ))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::config(format!("cannot size thread pool: {e}")))
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    match cli.command {
        Command::Optimize(a) => commands::optimize(&a.config, &a.overrides()),
        Command::Bench(a) => commands::bench(&a.config, &a.overrides()),
        Command::Spectrum(a) => {
            commands::spectrum(&a.common.config, &a.common.overrides(), a.result.as_deref())
        }
        Command::Uncertainty(a) => {
            commands::uncertainty(&a.common.config, &a.common.overrides(), a.result.as_deref())
        }
        Command::GenerateData(a) => commands::generate_data(&a.config, &a.overrides()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
