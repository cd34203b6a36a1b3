//! `dentage` — config-driven command line for the dental-age-estimation
//! pipeline: train a model, evaluate a checkpoint, sweep model families,
//! explain single predictions, summarize a dataset, or generate synthetic
//! radiographs.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::SweepKind;

/// A usage/config problem (exit 1) or a failure during the run (exit 2).
pub(crate) enum CliError {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

pub(crate) type CResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "dentage",
    version,
    about = "Age estimation from dental panoramic radiographs",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand that writes artifacts.
#[derive(Args)]
struct CommonArgs {
    /// Replace existing outputs instead of refusing to clobber them.
    #[arg(long)]
    overwrite: bool,
    /// Accepted for compatibility; runs are always fully deterministic
    /// (seeded RNG streams, single-threaded math).
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model per an experiment config, writing history, curves,
    /// and a checkpoint.
    Train {
        /// Experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the config's output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the split and weight-init seeds.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Evaluate a checkpoint on a manifest (the configured test split when
    /// --config is given, the whole manifest otherwise).
    Evaluate {
        /// Checkpoint directory (model.safetensors + model.json).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Labeled image manifest (CSV: path,age[,subject]).
        #[arg(long)]
        manifest: PathBuf,
        /// Experiment config supplying the split and batch size.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train and evaluate a family of models sequentially and emit a
    /// comparison report.
    Sweep {
        /// Experiment config (TOML); sweep.models lists entries like
        /// "vgg16" or "inception_v3:4" unless --sweep picks a preset.
        #[arg(long)]
        config: PathBuf,
        /// Preset model family to sweep.
        #[arg(long, value_enum)]
        sweep: Option<SweepKind>,
        /// Output directory (overrides the config's output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the split and weight-init seeds.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Explain one prediction: write a heatmap overlay PNG plus a JSON
    /// sidecar with the predicted age.
    Explain {
        /// Checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output PNG path (the JSON sidecar lands next to it).
        #[arg(long)]
        out: PathBuf,
        /// Radiograph to explain.
        image: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Summarize a manifest: age-distribution histogram plus summary stats.
    DatasetReport {
        /// Labeled image manifest.
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Generate a synthetic radiograph dataset with a known age signal.
    Synth {
        /// Output directory for images/ and manifest.csv.
        #[arg(long)]
        out: PathBuf,
        /// Number of images.
        #[arg(long, default_value_t = 200)]
        count: usize,
        /// Generator seed.
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Square image side in pixels.
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn run(cli: Cli) -> CResult<()> {
    match cli.command {
        Command::Train { config, out, seed, common } => {
            commands::cmd_train(&config, out.as_deref(), seed, common.overwrite)
        }
        Command::Evaluate { checkpoint, manifest, config, out, common } => commands::cmd_evaluate(
            &checkpoint,
            &manifest,
            config.as_deref(),
            out.as_deref(),
            common.overwrite,
        ),
        Command::Sweep { config, sweep, out, seed, common } => {
            commands::cmd_sweep(&config, sweep, out.as_deref(), seed, common.overwrite)
        }
        Command::Explain { checkpoint, out, image, common } => {
            commands::cmd_explain(&checkpoint, &image, &out, common.overwrite)
        }
        Command::DatasetReport { manifest, out, common } => {
            commands::cmd_dataset_report(&manifest, out.as_deref(), common.overwrite)
        }
        Command::Synth { out, count, seed, size, common } => {
            commands::cmd_synth(&out, count, seed, size, common.overwrite)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
