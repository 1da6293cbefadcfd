use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use knnseq::models::{FeedMode, ModelKind};
use knnseq::oversample::Method;
use serde::Serialize;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "knnseq", version, about = "Neighbor-sequence classifiers and oversampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
enum Command {
    /// Compute K-nearest-neighbor targets for a training set.
    Prepare(PrepareArgs),
    /// Fit a model on a training set and its targets.
    Train(TrainArgs),
    /// Score a checkpoint on a test set.
    Eval(EvalArgs),
    /// Score a plain majority-vote kNN classifier.
    BaselineKnn(BaselineArgs),
    /// Balance a training set with synthetic minority rows.
    Oversample(OversampleArgs),
    /// Swap two neighbor ranks in a targets file.
    AblateSwap(SwapArgs),
    /// Write 2-D principal-component coordinates for plotting.
    Project(ProjectArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Mode {
    Full,
    Ooc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum FileFormat {
    Csv,
    Libsvm,
}

#[derive(Args, Debug, Serialize)]
struct DataArgs {
    /// Training data (csv with a `label` column, or libsvm).
    #[arg(long)]
    train: PathBuf,
    /// Input format; inferred from the file extension when omitted.
    #[arg(long, value_enum)]
    format: Option<FileFormat>,
    /// Feature count for libsvm input.
    #[arg(long)]
    dim: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
struct SearchArgs {
    #[arg(long, value_enum, default_value = "full")]
    mode: Mode,
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Samples per out-of-core batch (default 64).
    #[arg(long)]
    batch: Option<usize>,
    /// Out-of-core rounds per query (default 50).
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct PrepareArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    search: SearchArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    search: SearchArgs,
    /// Targets from `prepare`; required unless `--mode ooc`.
    #[arg(long)]
    targets: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "v2vsls")]
    model: ModelKind,
    #[arg(long, default_value_t = 0.85)]
    tau: f64,
    #[arg(long, default_value_t = 9.5)]
    alpha: f64,
    #[arg(long, default_value_t = 0.12)]
    lambda: f64,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.2)]
    dropout: f64,
    #[arg(long, default_value_t = 128)]
    hidden: usize,
    #[arg(long, default_value_t = 64)]
    memory_size: usize,
    #[arg(long, default_value_t = 64)]
    embed_dim: usize,
    #[arg(long)]
    no_batch_norm: bool,
    #[arg(long, default_value = "predicted")]
    feed: FeedMode,
    /// Epochs without validation improvement before stopping; 0 disables.
    #[arg(long, default_value_t = 5)]
    patience: usize,
    #[arg(long, default_value_t = 0.1)]
    validation_fraction: f64,
    /// Per-epoch trace as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Independent memory batches averaged per query.
    #[arg(long, default_value_t = 1)]
    memory_draws: usize,
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct BaselineArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    search: SearchArgs,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct OversampleArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "model")]
    method: Method,
    /// Checkpoint of a v2vsls or mnknn-vec model, for `--method model`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Synthetic vectors per source row for `--method model`.
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 5)]
    smote_k: usize,
    /// Target class size relative to the largest class.
    #[arg(long, default_value_t = 1.0)]
    ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct SwapArgs {
    #[arg(long)]
    targets: PathBuf,
    #[arg(long, default_value_t = 1)]
    first: usize,
    #[arg(long, default_value_t = 3)]
    second: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct ProjectArgs {
    /// Dataset or oversampled csv (an `origin` column is carried through).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    format: Option<FileFormat>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match serde_json::to_string(&cli.command) {
        Ok(cfg) => eprintln!("config: {cfg}"),
        Err(e) => eprintln!("config: <unprintable: {e}>"),
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e
                .downcast_ref::<knnseq::Error>()
                .is_some_and(|e| matches!(e, knnseq::Error::Usage(_)));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
