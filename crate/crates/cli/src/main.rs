//! Experiment runner: dataset generation, two-stage and baseline training,
//! patch-level evaluation, model comparison, and electricity preparation.
//!
//! Every command writes a run manifest with the fully resolved
//! configuration; re-running with identical flags reproduces outputs
//! bit for bit on the same platform.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use patchcast::error::Error;

#[derive(Parser)]
#[command(
    name = "patchcast",
    version,
    about = "Patch-tokenized time-series forecasting experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train and test datasets.
    Generate(GenerateArgs),
    /// Train the proposed two-stage model or a baseline.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Evaluate(EvaluateArgs),
    /// Compare models from evaluation reports or end to end.
    Compare(CompareArgs),
    /// Parse, normalize, and window raw electricity readings.
    ElectricityPrepare(ElectricityArgs),
}

#[derive(Args)]
struct CommonFlags {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// JSON config file (command line flags win over it).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Desk-scale preset: N=500, stage1 200 epochs, stage2/baselines 100.
    #[arg(long, default_value_t = false)]
    desk_scale: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: CommonFlags,
    /// Samples per dataset.
    #[arg(long)]
    n: Option<usize>,
    /// Time steps per sample.
    #[arg(long)]
    t: Option<usize>,
    /// Seed of the training dataset.
    #[arg(long)]
    train_seed: Option<u64>,
    /// Seed of the test dataset.
    #[arg(long)]
    test_seed: Option<u64>,
    #[arg(long)]
    alpha1: Option<f64>,
    #[arg(long)]
    alpha2: Option<f64>,
    #[arg(long)]
    alpha3: Option<f64>,
    #[arg(long)]
    sigma1: Option<f64>,
    #[arg(long)]
    sigma2: Option<f64>,
    #[arg(long)]
    sigma_y: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum ModelKind {
    Proposed,
    Tcn,
    Patchtst,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonFlags,
    /// Which model to train.
    #[arg(long, value_enum)]
    model: ModelKind,
    /// Training dataset (PCDS container).
    #[arg(long)]
    data: PathBuf,
    /// Training seed (init, shuffling, dropout).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Patch length.
    #[arg(long)]
    patch_len: Option<usize>,
    /// Forecast horizon in patches.
    #[arg(long)]
    horizon: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Mini-batch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Stage-1 encoder epochs.
    #[arg(long)]
    stage1_epochs: Option<usize>,
    /// Stage-2 forecaster epochs.
    #[arg(long)]
    stage2_epochs: Option<usize>,
    /// Baseline epochs.
    #[arg(long)]
    baseline_epochs: Option<usize>,
    /// Reuse a trained encoder checkpoint instead of running stage 1.
    #[arg(long)]
    encoder: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Model checkpoint (PCKP).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluation dataset (PCDS).
    #[arg(long)]
    data: PathBuf,
    /// Report path; defaults to `<checkpoint stem>-metrics.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: CommonFlags,
    /// Existing evaluation reports to tabulate (at least two).
    #[arg(long, num_args = 1..)]
    reports: Vec<PathBuf>,
    /// Train and evaluate all three models end to end.
    #[arg(long, default_value_t = false)]
    end_to_end: bool,
    /// Training dataset for --end-to-end.
    #[arg(long)]
    train_data: Option<PathBuf>,
    /// Held-out dataset for --end-to-end.
    #[arg(long)]
    test_data: Option<PathBuf>,
    /// Training seed for --end-to-end.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Patch length for --end-to-end.
    #[arg(long)]
    patch_len: Option<usize>,
    /// Forecast horizon for --end-to-end.
    #[arg(long)]
    horizon: Option<usize>,
}

#[derive(Args)]
struct ElectricityArgs {
    #[command(flatten)]
    common: CommonFlags,
    /// Raw readings file (semicolon-separated, decimal commas).
    #[arg(long)]
    source: PathBuf,
    /// Meter whose patch-level average load is the target.
    #[arg(long)]
    target_meter: String,
    /// Feature meters (comma separated); default: target plus the first
    /// five other meters in file order.
    #[arg(long, value_delimiter = ',')]
    input_meters: Vec<String>,
    /// Window length T.
    #[arg(long)]
    window: Option<usize>,
    /// Stride between training windows (default T/2).
    #[arg(long)]
    train_stride: Option<usize>,
    /// Stride between test windows (default T).
    #[arg(long)]
    test_stride: Option<usize>,
    /// Split boundary timestamp (YYYY-MM-DD HH:MM:SS); rows at or before it
    /// train, later rows test. Default: start of the file's final year.
    #[arg(long)]
    split: Option<String>,
    /// Patch length recorded for downstream training.
    #[arg(long)]
    patch_len: Option<usize>,
    /// Forecast horizon recorded for downstream training.
    #[arg(long)]
    horizon: Option<usize>,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Shape { .. } => 2,
        Error::Io { .. } => 3,
        Error::Format(_) | Error::Version { .. } | Error::Integrity(_) | Error::Parse { .. } => 4,
        Error::NonFinite { .. } | Error::Diverged { .. } | Error::Oracle(_) => 5,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => commands::generate(args),
        Command::Train(args) => commands::train(args),
        Command::Evaluate(args) => commands::evaluate(args),
        Command::Compare(args) => commands::compare(args),
        Command::ElectricityPrepare(args) => commands::electricity_prepare(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
