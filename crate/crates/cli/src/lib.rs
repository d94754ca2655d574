//! Batch pipeline for the subsampled neural operator: synthetic data
//! generation, two-phase training, full-grid evaluation and point inference.
//!
//! Exit codes are 0 on success, 2 for configuration or input errors and 3
//! when training diverges.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("training diverged at step {step} (mse = {loss})")]
    Divergence { step: u64, loss: f64 },
    #[error("every query row failed ({0} rows)")]
    AllRowsFailed(usize),
    #[error(transparent)]
    Core(subop::Error),
}

impl From<subop::Error> for CliError {
    fn from(e: subop::Error) -> Self {
        match e {
            subop::Error::Divergence { step, loss } => CliError::Divergence { step, loss },
            other => CliError::Core(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Divergence { .. } => 3,
            CliError::Core(subop::Error::Solver { .. }) => 3,
            _ => 2,
        }
    }
}

pub(crate) fn io_err(what: &str, path: &std::path::Path, e: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("{what} {}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "subop", version, about = "Subsampled neural operator pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic diffusion cases and a manifest.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on a generated dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on full sample grids.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        /// Evaluate at this many random cells (all timestamps) instead of the full grid.
        #[arg(long)]
        points: Option<usize>,
        /// Seed for the random cells picked by --points.
        #[arg(long, default_value_t = 0)]
        points_seed: u64,
        /// Write pointwise-difference fields for each sample into this directory.
        #[arg(long)]
        difference: Option<PathBuf>,
        #[arg(long, default_value_t = 4096)]
        batch_size: usize,
    },
    /// Predict at arbitrary (t, x, y, z) points of one sample.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4096)]
        batch_size: usize,
    },
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData {
            config,
            out,
            samples,
            seed,
        } => commands::gen_data(config.as_deref(), &out, samples, seed).map(|_| ()),
        Command::Train { config, data, out } => {
            commands::train(config.as_deref(), &data, &out).map(|_| ())
        }
        Command::Eval {
            checkpoint,
            data,
            report,
            split,
            points,
            points_seed,
            difference,
            batch_size,
        } => commands::eval(&commands::EvalArgs {
            checkpoint: &checkpoint,
            data: &data,
            report: &report,
            split,
            points,
            points_seed,
            difference: difference.as_deref(),
            batch_size,
        })
        .map(|_| ()),
        Command::Infer {
            checkpoint,
            sample,
            points,
            out,
            batch_size,
        } => commands::infer(&checkpoint, &sample, &points, &out, batch_size).map(|_| ()),
    }
}
