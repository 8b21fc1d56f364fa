//! `surgvae`: synthetic data, cross-validated training, baselines,
//! attributions and latent projections.

mod commands;
mod report;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use surgvae::{Error, MathError};

#[derive(Parser)]
#[command(name = "surgvae", version, about = "Multi-cohort disentangled VAE risk models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted synthetic dataset and its oracle probabilities.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Cross-validate the VAE and the logistic baseline on the target group.
    Crossval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; results do not depend on this.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Integrated Gradients importances for one outcome.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        outcome: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        steps: usize,
    },
    /// t-SNE of the target group's latent means.
    Project {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30.0)]
        perplexity: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Cross-validated logistic regression in the run report schema.
    Baseline {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;
/// Outputs were written but some metric is undefined.
const EXIT_UNDEFINED: u8 = 5;

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) | Error::Usage(_) | Error::Calibration { .. } => EXIT_CONFIG,
        Error::NumericalAbort { .. } | Error::Math(MathError::NonFinite(_)) => EXIT_NUMERICAL,
        Error::Undefined(_) => EXIT_UNDEFINED,
        Error::Math(_) => EXIT_NUMERICAL,
        _ => EXIT_IO,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth { config, out, seed } => commands::synth(config.as_deref(), out, *seed),
        Command::Crossval { data, config, out, jobs } => commands::crossval(data, config, out, *jobs),
        Command::Explain {
            checkpoint,
            data,
            outcome,
            out,
            steps,
        } => commands::explain(checkpoint, data, outcome, out, *steps),
        Command::Project {
            checkpoint,
            data,
            out,
            perplexity,
            seed,
        } => commands::project(checkpoint, data, out, *perplexity, *seed),
        Command::Baseline { data, config, out } => commands::baseline(data, config, out),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("warning: outputs written, but some metrics are undefined (see the report)");
            ExitCode::from(EXIT_UNDEFINED)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
