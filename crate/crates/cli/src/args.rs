use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(
    name = "lossearch",
    version,
    about = "Train baselines and search for loss functions"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train with a fixed reference loss.
    Baseline(BaselineArgs),
    /// Search the piecewise-linear loss family with REINFORCE.
    Search(SearchArgs),
    /// Top-1 accuracy of a checkpoint, printed as JSON.
    Eval(EvalArgs),
    /// Per-sample target gradients of a searched loss and a reference loss.
    ExportGrads(ExportArgs),
    /// Re-run the baseline or search recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Blobs,
    Csv,
    Idx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossName {
    Softmax,
    Focal,
    Arcface,
    Lsoftmax,
    Asoftmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Cosine,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    #[arg(long, value_enum, default_value = "blobs")]
    pub data: DataKind,
    /// Blob classes.
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(2..))]
    pub classes: u64,
    /// Blob samples per class; 80% go to training.
    #[arg(long, default_value_t = 250, value_parser = clap::value_parser!(u64).range(4..))]
    pub per_class: u64,
    /// Blob feature dimension.
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..))]
    pub dim: u64,
    /// Standard deviation around each blob center.
    #[arg(long, default_value_t = 0.35)]
    pub spread: f64,
    #[arg(long, required_if_eq("data", "csv"))]
    pub csv_path: Option<PathBuf>,
    #[arg(long, default_value = "label")]
    pub label_column: String,
    #[arg(long, required_if_eq("data", "idx"))]
    pub idx_images: Option<PathBuf>,
    #[arg(long, required_if_eq("data", "idx"))]
    pub idx_labels: Option<PathBuf>,
    /// Validation share for CSV and IDX data.
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    /// Probability of flipping each training label.
    #[arg(long, default_value_t = 0.0)]
    pub noise_ratio: f64,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    pub epochs: u64,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch_size: u64,
    /// Logit scale `s` of the cosine head.
    #[arg(long, default_value_t = 10.0)]
    pub scale: f64,
    /// Hidden layer widths, comma separated (empty for none).
    #[arg(long, value_delimiter = ',', default_value = "32")]
    pub hidden: Vec<u64>,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..))]
    pub feature_dim: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, value_enum, default_value = "softmax")]
    pub loss: LossName,
    /// Margin for arcface (default 0.5), lsoftmax (2) and asoftmax (0.35).
    #[arg(long)]
    pub margin: Option<f64>,
    /// Focal exponent.
    #[arg(long, default_value_t = 2.0)]
    pub alpha: f64,
    /// Classifier head; margin losses always use the cosine head.
    #[arg(long, value_enum, default_value = "linear")]
    pub head: Head,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SearchArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Population size.
    #[arg(long = "B", default_value_t = 32, value_parser = clap::value_parser!(u64).range(1..))]
    pub population: u64,
    /// Intervals per piecewise transform.
    #[arg(long = "M", default_value_t = 6, value_parser = clap::value_parser!(u64).range(1..))]
    pub intervals: u64,
    #[arg(long, default_value_t = 0.2)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0.05)]
    pub eta: f64,
    #[arg(long, value_enum, default_value = "adam")]
    pub optimizer: Optimizer,
    /// Parallel candidates; `AMLFS_WORKERS` takes precedence when set.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub workers: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Take the dataset from a run manifest instead of the data flags.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "val")]
    pub split: Split,
}

#[derive(Debug, Clone, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Searched loss parameters (JSON).
    #[arg(long)]
    pub loss_params: PathBuf,
    #[arg(long, value_enum, default_value = "softmax")]
    pub reference: LossName,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long, default_value_t = 2.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 10.0)]
    pub scale: f64,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "train")]
    pub split: Split,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}
