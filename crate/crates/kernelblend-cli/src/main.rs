//! `kernelblend` — batch front-end for kernel-weight learning.
//!
//! Exit codes: 0 success, 2 config/schema error, 3 data error,
//! 4 solver non-convergence, 5 taxonomy relation failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod data;
mod error;
mod report;

use error::CliError;

#[derive(Parser)]
#[command(name = "kernelblend", version, about = "Kernel-weight learning over fixed base kernels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit kernel weights per the run config; writes report.json and trace.csv.
    Fit {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to the config's `output`, else its directory).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Posterior-mean predictions at new inputs from a fitted report.
    Predict {
        #[arg(long)]
        config: PathBuf,
        /// report.json produced by `fit`.
        #[arg(long)]
        model: PathBuf,
        /// CSV of test inputs with header x1,..,xd.
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Numerically verify the objective-taxonomy relations at desk scale.
    TaxonomyCheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate a seeded synthetic training CSV from a chosen weight vector.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Parallelism cap from the environment; evaluation is single-threaded, so
/// any valid value is compatible, but garbage is still rejected.
fn validate_thread_cap() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("KERNELBLEND_THREADS") {
        v.parse::<usize>().map_err(|_| {
            CliError::config(format!(
                "KERNELBLEND_THREADS must be a nonnegative integer (0 = sequential), got '{v}'"
            ))
        })?;
    }
    Ok(())
}

fn run() -> Result<i32, CliError> {
    validate_thread_cap()?;
    let cli = Cli::parse();
    match cli.command {
        Command::Fit { config, out, seed } => commands::cmd_fit(&config, out.as_deref(), seed),
        Command::Predict { config, model, test, out } => {
            commands::cmd_predict(&config, &model, &test, out.as_deref())
        }
        Command::TaxonomyCheck { config, out, seed } => {
            commands::cmd_taxonomy_check(&config, out.as_deref(), seed)
        }
        Command::Synth { config, out, seed } => commands::cmd_synth(&config, out.as_deref(), seed),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code as u8)
        }
    }
}
