//! `dplet`: denoise, convert, train, evaluate and inspect traffic forecasters.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dplet::predictor::Variant;
use dplet::Error;

#[derive(Parser, Debug)]
#[command(
    name = "dplet",
    version,
    about = "Cellular traffic forecasting with TSVDR denoising, TCN patch enhancement and a Transformer encoder"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    #[command(flatten)]
    pub common: Common,
}

/// Options every subcommand accepts.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Random seed; overrides the config file's `seed`.
    #[arg(long, global = true, env = "DPLET_SEED")]
    pub seed: Option<u64>,

    /// Key-value run configuration (model, training and split keys).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output file, or directory for `train`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Apply TSVDR to a wide CSV and write the reconstruction.
    Denoise(DenoiseArgs),
    /// Generate synthetic traffic.
    Synth(SynthArgs),
    /// Aggregate long-format CDR records into a wide CSV.
    Convert(ConvertArgs),
    /// Train a model and write its checkpoint and training report.
    Train(TrainArgs),
    /// Forecast the steps following the end of a wide CSV.
    Predict(PredictArgs),
    /// Score a checkpoint on the test split of a dataset.
    Evaluate(EvaluateArgs),
    /// Train and score the three ablation variants.
    Ablate(AblateArgs),
    /// Print trainable parameter counts.
    Params(ModelOverrides),
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Wide CSV: one column per channel, optional leading `timestamp`.
    #[arg(long)]
    pub data: PathBuf,

    /// Sampling interval of the data in seconds.
    #[arg(long, default_value_t = 600)]
    pub step_seconds: u64,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelOverrides {
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,

    #[arg(long)]
    pub horizon: Option<usize>,

    #[arg(long)]
    pub lookback: Option<usize>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TsvdrMode {
    Relative,
    Absolute,
}

#[derive(Args, Debug)]
pub struct DenoiseArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// Threshold mode; defaults to the config's truncation policy.
    #[arg(long, value_enum, requires = "threshold")]
    pub mode: Option<TsvdrMode>,

    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SynthFormat {
    /// One column per channel.
    Wide,
    /// `timestamp,grid_id,traffic` rows, the input of `convert`.
    Long,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    pub channels: usize,
    #[arg(long, default_value_t = 2880)]
    pub steps: usize,
    /// Steps per day.
    #[arg(long, default_value_t = 144)]
    pub period: usize,
    #[arg(long, default_value_t = 10.0)]
    pub baseline: f64,
    #[arg(long, default_value_t = 6.0)]
    pub daily_amplitude: f64,
    /// Multiplier on the last two days of each week.
    #[arg(long, default_value_t = 0.9)]
    pub weekly_multiplier: f64,
    #[arg(long, default_value_t = 0.5)]
    pub channel_spread: f64,
    /// Expected bursts per step and channel.
    #[arg(long, default_value_t = 0.002)]
    pub burst_rate: f64,
    #[arg(long, default_value_t = 8.0)]
    pub burst_magnitude: f64,
    /// Burst decay constant in steps.
    #[arg(long, default_value_t = 6.0)]
    pub burst_decay: f64,
    #[arg(long, default_value_t = 0.5)]
    pub noise_std: f64,
    #[arg(long, default_value_t = 600)]
    pub step_seconds: u64,
    /// Start time of the first step, in seconds; adds a timestamp column.
    #[arg(long)]
    pub start: Option<i64>,
    #[arg(long, value_enum, default_value_t = SynthFormat::Wide)]
    pub format: SynthFormat,
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    /// Long CSV with `timestamp`, `grid_id` and a traffic column.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "internet")]
    pub traffic_column: String,
    /// Aggregation interval in seconds.
    #[arg(long, default_value_t = 600)]
    pub interval: u64,
    /// Keep a seeded random sample of this many channels.
    #[arg(long)]
    pub sample: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelOverrides,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelOverrides,
}

/// Process exit code for an error: 2 for configuration and usage, 3 for
/// data, 4 for training.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parameter(_) => 2,
        Error::Training(_) | Error::NonFinite { .. } | Error::Contract(_) => 4,
        Error::Data(_)
        | Error::Parse { .. }
        | Error::Shape { .. }
        | Error::NoConvergence { .. }
        | Error::Checkpoint(_)
        | Error::Io(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
