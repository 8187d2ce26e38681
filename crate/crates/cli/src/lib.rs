//! Command-line driver: data generation, curation, pretraining, preference
//! training, evaluation and diagnostics for the toy diffusion task.

pub mod commands;
pub mod config;
pub mod output;
pub mod study;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::run;

#[derive(Debug, Parser)]
#[command(
    name = "ncplab",
    version,
    about = "Preference optimization for a toy diffusion model"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand. Precedence: flag, then config file, then
/// built-in default.
#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; every random stream is derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for evaluation (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate annotated preference pairs on the toy task.
    GenData(commands::GenDataArgs),
    /// Filter a preference corpus or build one of the curated pair sets.
    Curate(commands::CurateArgs),
    /// Train the base denoiser on task samples.
    Pretrain(commands::PretrainArgs),
    /// Preference fine-tuning of a base checkpoint.
    Train(commands::TrainArgs),
    /// Paired win-rate matrix across checkpoints.
    Eval(commands::EvalArgs),
    /// Finite-difference gradient checks and the cancellation report.
    Diag(commands::DiagArgs),
}
