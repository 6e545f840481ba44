//! `hion`: train, fine-tune, solve and simulate Hion controllers.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 when a
//! run aborts at runtime.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hion_core::HionError;

#[derive(Debug, Parser)]
#[command(name = "hion", version, about = "Neural optimal controllers trained on Pontryagin conditions")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML configuration file.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory receiving every output of the run.
    #[arg(short, long, global = true, default_value = "out")]
    pub outdir: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for gradient evaluation (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a controller from scratch.
    Train,
    /// Continue training a checkpoint, possibly under a new cost or terminal time.
    Finetune {
        /// Parent checkpoint; overrides `train.finetune_from`.
        #[arg(long)]
        parent: Option<PathBuf>,
    },
    /// Solve one two-point boundary value problem with a trained controller.
    Tpbvp {
        /// Trained controller to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Observed state, comma separated.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, required = true)]
        x_o: Vec<f64>,
        /// Reference, comma separated.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, required = true)]
        x_r: Vec<f64>,
        /// Evenly spaced output rows from 0 to the terminal time.
        #[arg(long, default_value_t = 101)]
        n_points: usize,
    },
    /// Run a closed-loop scenario.
    Simulate {
        /// Replaces the checkpoint of a `hion` controller in the configuration.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run several controllers on one scenario and rank them by cost.
    Compare,
}

/// Command failure, classified by exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<HionError> for CliError {
    fn from(e: HionError) -> Self {
        match e {
            HionError::Config(_)
            | HionError::SystemMismatch { .. }
            | HionError::DimensionMismatch { .. }
            | HionError::Checkpoint(_)
            | HionError::Json(_) => CliError::Usage(e.into()),
            HionError::Jet(_)
            | HionError::TrainingAborted { .. }
            | HionError::SimulationAborted { .. }
            | HionError::Io { .. } => CliError::Runtime(e.into()),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (CliError::Usage(err) | CliError::Runtime(err)) = &e;
            eprintln!("error: {err:#}");
            ExitCode::from(e.exit_code())
        }
    }
}
