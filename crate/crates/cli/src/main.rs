//! Batch experiment pipeline: `analyze` extracts market regimes, `simulate`
//! dumps the Monte Carlo panels, `train` builds the model pool, `backtest`
//! runs the evaluation harnesses, `report` re-renders saved reports.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::CliError;
use config::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "mcpm",
    about = "Regime-conditioned Monte Carlo portfolio manager pipeline",
    version
)]
struct Cli {
    /// Experiment configuration file (TOML).
    #[arg(long, global = true, default_value = "config.toml")]
    config: PathBuf,

    /// Cap on worker threads across all stages.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Master seed override (re-seeds simulator, action sampling, training).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract representative correlation matrices from the price history.
    Analyze,
    /// Dump the per-regime simulated market panels as CSV files.
    Simulate,
    /// Extract the action set and train the model pool.
    Train,
    /// Backtest the pool against the classical allocators.
    Backtest,
    /// Re-render saved backtest reports as text tables.
    Report,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Validation("--jobs must be at least 1".into()));
        }
        // ignore the error when a pool already exists (tests, repeat calls)
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    let mut cfg =
        ExperimentConfig::load(&cli.config).map_err(|e| CliError::Validation(e.to_string()))?;
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(jobs) = cli.jobs {
        cfg.train.workers = cfg.train.workers.min(jobs);
    }
    match cli.command {
        Command::Analyze => commands::cmd_analyze(&cfg),
        Command::Simulate => commands::cmd_simulate(&cfg),
        Command::Train => commands::cmd_train(&cfg),
        Command::Backtest => commands::cmd_backtest(&cfg),
        Command::Report => commands::cmd_report(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
