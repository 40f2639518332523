use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

/// Train and evaluate continuous-discrete neural state space models.
#[derive(Debug, Parser)]
#[command(name = "ncdssm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Options {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint to resume from or predict with.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Overrides the seed of the command's random draws.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Sample trajectories per sequence; overrides `eval.samples`.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Directory holding predictions to evaluate; defaults to the output directory.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic train/val/test splits and a manifest.
    Generate(Options),
    /// Fit a model by maximizing the ELBO.
    Train(Options),
    /// Fill in the missing timesteps of the test set.
    Impute(Options),
    /// Forecast the test set beyond its context window.
    Forecast(Options),
    /// Mean squared error of saved predictions against ground truth.
    Evaluate(Options),
    /// Finite-difference check of the ELBO gradient on a toy instance.
    Gradcheck(Options),
}

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(o) => commands::generate(o),
        Command::Train(o) => commands::train(o),
        Command::Impute(o) => commands::predict(o, false),
        Command::Forecast(o) => commands::predict(o, true),
        Command::Evaluate(o) => commands::evaluate(o),
        Command::Gradcheck(o) => commands::gradcheck(o),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                ncdssm::Error::Config { .. } => EXIT_CONFIG,
                e if e.is_numerical() => EXIT_NUMERICAL,
                _ => EXIT_FAILURE,
            };
            ExitCode::from(code)
        }
    }
}
