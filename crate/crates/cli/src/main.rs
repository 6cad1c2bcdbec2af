mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::error;

use error::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(
    name = "segt",
    version,
    about = "Segment transformer for protein temperature stability"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Cluster-aware train/validation/test split of a dataset TSV.
    Split(SplitArgs),
    /// Train a model and keep the checkpoint with the best validation RMSE.
    Train(TrainArgs),
    /// Predict every embedding listed in a manifest, one JSON line each.
    Predict(PredictArgs),
    /// Score JSONL predictions against a labelled TSV.
    Evaluate(EvaluateArgs),
    /// Single-substitution scan and candidate selection for one protein.
    Scan(ScanArgs),
    /// Dump intermediate features as CSV for external projection.
    ExportFeatures(ExportArgs),
}

#[derive(clap::Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub test_frac: f64,
    /// Fraction of the clusters in each temperature range sent to validation.
    #[arg(long, default_value_t = 0.1)]
    pub val_frac: f64,
    #[arg(long, value_delimiter = ',', default_values_t = [45.0, 70.0, 100.0])]
    pub boundaries: Vec<f64>,
    /// k-mer Jaccard similarity above which sequences share a cluster.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, default_value_t = 5)]
    pub kmer: usize,
}

#[derive(clap::Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Model JSON; missing fields take their defaults.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// Training JSON; missing fields take their defaults.
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed in the training config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(clap::Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    /// Dataset TSV holding the true temperatures.
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [45.0, 70.0])]
    pub boundaries: Vec<f64>,
    /// Where to write the report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
pub struct ScanArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Embedding file of the wild-type sequence.
    #[arg(long)]
    pub wild_type: PathBuf,
    /// Manifest of variant embeddings named like `A78E`.
    #[arg(long)]
    pub variants: PathBuf,
    #[arg(long)]
    pub criteria: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Wild-type sequence; recovered from the variant names when omitted.
    #[arg(long)]
    pub sequence: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    /// Segment features straight after conversion.
    Segments,
    /// Segment features after the attention stack.
    Dgsa,
    /// Pooled per-scale vectors.
    Pooled,
}

#[derive(clap::Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long, value_enum)]
    pub stage: Stage,
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset TSV supplying the temperature column.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("SEGT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("SEGT_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot size thread pool: {e}")))
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match cli.command {
        Command::Split(a) => commands::split(&a),
        Command::Train(a) => commands::train(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Scan(a) => commands::scan(&a),
        Command::ExportFeatures(a) => commands::export_features(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
