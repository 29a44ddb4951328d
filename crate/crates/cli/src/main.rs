mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wavegraph::data_io::{OGW_EXCITATION_HZ, STORE_ENV};
use wavegraph::geometry::SplitName;
use wavegraph::training::Preset;

#[derive(Parser, Debug)]
#[command(name = "wavegraph", version, about = "Graph-based guided-wave damage localisation")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic store with a known forward mechanism.
    Synth(SynthArgs),
    /// Convert an exported OGW-1 archive into a canonical store.
    Ingest(IngestArgs),
    /// Preprocess a store for one split and seed (cached).
    Prep(PrepArgs),
    /// Train one model kind for one or more seeds.
    Train(TrainArgs),
    /// Evaluate trained checkpoints and write the report.
    Eval(EvalArgs),
    /// Rebuild the report from existing evaluations.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    /// Store directory to create.
    #[arg(long, env = STORE_ENV)]
    pub store: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub samples_per_location: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct IngestArgs {
    /// Directory holding index.json and the measurement CSV files.
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long, env = STORE_ENV)]
    pub store: PathBuf,
    #[arg(long, default_value_t = OGW_EXCITATION_HZ)]
    pub excitation_hz: f64,
}

/// Options shared by every command that reads a store.
#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    #[arg(long, env = STORE_ENV)]
    pub store: PathBuf,
    #[arg(long, default_value = "A")]
    pub split: SplitName,
    /// Output directory for caches, runs and reports.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// `desk` trims widths and epochs for laptop-scale runs.
    #[arg(long, default_value = "desk")]
    pub preset: Preset,
    #[arg(long)]
    pub band_low_hz: Option<f64>,
    #[arg(long)]
    pub band_high_hz: Option<f64>,
    /// Number of frequency bins K.
    #[arg(long)]
    pub bins: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct PrepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Overrides {
    #[arg(long)]
    pub lambda_max: Option<f64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub ramp: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub eps_weight: Option<f64>,
    #[arg(long)]
    pub eps_grad: Option<f64>,
    /// Epochs of stages I, II and III, e.g. `150,150,600`.
    #[arg(long, value_delimiter = ',')]
    pub epochs: Option<Vec<usize>>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "wgn-coupled")]
    pub model: String,
    #[arg(long, visible_alias = "seed", value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    /// Train seeds on separate threads.
    #[arg(long)]
    pub parallel: bool,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated model kinds or `all`.
    #[arg(long, default_value = "all")]
    pub models: String,
    #[arg(long, value_delimiter = ',', default_value = "0,1,42")]
    pub seeds: Vec<u64>,
    /// Grow the plate domain by this much before calling a prediction damaged.
    #[arg(long, default_value_t = 0.0)]
    pub margin: f64,
}

#[derive(Args, Debug, Clone)]
pub struct ReportArgs {
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Expected model kinds (comma-separated or `all`); gaps are errors.
    #[arg(long)]
    pub models: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    pub splits: Option<Vec<SplitName>>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = commands::exit_code(&err);
            let body = serde_json::json!({
                "error": commands::error_kind(&err),
                "message": format!("{err:#}"),
                "exit_code": code,
            });
            eprintln!("{body}");
            ExitCode::from(code)
        }
    }
}
