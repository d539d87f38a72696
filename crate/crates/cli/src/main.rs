//! Experiment runner for the few-shot regression meta-learning laboratory.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use config::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "metalearn",
    version,
    about = "Bilevel meta-training, transfer-error evaluation, theory diagnostics, \
             and online meta-learning for the sine regression benchmark"
)]
struct Cli {
    /// Experiment config JSON; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config field by dotted path, e.g. --set train.task_count=500
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train a feature network; writes checkpoint, log, and manifest.
    Train,
    /// Transfer error of a trained checkpoint on fresh meta-test tasks.
    Eval,
    /// Full strategy x T x (m,n) x seed sweep with per-cell resume.
    Grid,
    /// Bound report and complexity estimates for a trained checkpoint.
    Diagnose,
    /// Follow-the-meta-leader run with regret trace.
    Online,
    /// Finite-difference checks for every differentiable op.
    Gradcheck,
}

fn configure_workers() -> Result<()> {
    if let Ok(raw) = std::env::var("METALEARN_WORKERS") {
        let count: usize = raw
            .parse()
            .with_context(|| format!("METALEARN_WORKERS must be a positive integer, got '{raw}'"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(count)
            .build_global()
            .context("initializing worker pool")?;
    }
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    configure_workers()?;
    let config = ExperimentConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Train => commands::cmd_train(&config),
        Command::Eval => commands::cmd_eval(&config),
        Command::Grid => commands::cmd_grid(&config),
        Command::Diagnose => commands::cmd_diagnose(&config),
        Command::Online => commands::cmd_online(&config),
        Command::Gradcheck => commands::cmd_gradcheck(&config),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
