//! Batch entry point: synthesize panels, train, generate virtual samples,
//! evaluate, and merge reports.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime error.
//! Structured log lines go to standard error as `ts=… phase=… key=value…`.
//! Option precedence: command-line flag > `STGAN_SEED` environment variable
//! (seed only) > config file > built-in default.

mod commands;
mod lock;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "stgan",
    about = "Virtual-sample generation and multi-region demand forecasting"
)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the training/synthesis seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Swap in the down-scaled predictor configuration.
    #[arg(long, global = true)]
    desk_scale: bool,
    /// Override the number of joint iterations.
    #[arg(long, global = true)]
    max_iters: Option<u64>,
    /// Override the number of pretraining epochs.
    #[arg(long, global = true)]
    pretrain_epochs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic demand panel CSV.
    Synth {
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the predictor only (no adversarial iterations).
    Pretrain {
        /// Input panel CSV (defaults to the config's data source).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Full training: pretraining plus adversarial iterations.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write virtual-sample CSVs from a trained checkpoint.
    Generate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory for virtual_NNNN.csv files.
        #[arg(long)]
        out_dir: PathBuf,
        /// Number of virtual windows to write.
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
    /// Backtest a checkpoint and write the metric report.
    Evaluate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output report JSON path.
        #[arg(long)]
        out: PathBuf,
        /// Optional flat CSV of per-region metrics.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Merge metric reports into one summary.
    Report {
        /// Output summary JSON path.
        #[arg(long)]
        out: PathBuf,
        /// Externally computed baseline errors as name=mae,mape
        /// (may repeat); merged into the improvement table.
        #[arg(long = "external")]
        external: Vec<String>,
        /// Input report JSON paths.
        inputs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are successful exits.
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::CliError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(1)
        }
        Err(commands::CliError::Runtime { name, message }) => {
            eprintln!("error: {name}: {message}");
            ExitCode::from(2)
        }
    }
}
