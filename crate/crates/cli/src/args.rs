use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "sttm", version, about = "Support tensor train machine experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train an SVM, STM or STTM classifier (one-vs-one for more than two classes).
    Train(TrainArgs),
    /// Evaluate a saved model on a test split.
    Eval(EvalArgs),
    /// Grid over training batch sizes and the second TT-rank.
    Sweep(SweepArgs),
    /// Paired STTM trainings with and without canonical updates.
    AblateCanonical(AblateArgs),
    /// Re-run the command recorded in a manifest.
    Rerun(RerunArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Svm,
    Stm,
    Sttm,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    Random,
    FromSvm,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct DataArgs {
    #[arg(long, value_enum)]
    pub dataset: DatasetKind,
    /// Directory holding `mnist/` and `cifar-10-batches-bin/`.
    #[arg(long, env = "STTM_DATA_DIR", default_value = "/root/data")]
    pub data_dir: PathBuf,
    /// Class labels to keep (default: all MNIST digits, CIFAR classes 0,1).
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<u32>>,
    /// Training samples taken in file order from the training pool.
    #[arg(long)]
    pub train_count: Option<usize>,
    /// Limit the test split to its first N samples.
    #[arg(long)]
    pub test_count: Option<usize>,
    /// Reshape tensor-model samples to these dims (SVM always vectorizes).
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    /// Keep raw 0..255 pixel values instead of dividing by 255.
    #[arg(long)]
    pub no_scale: bool,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value = "sttm")]
    pub kind: Kind,
    /// TT-ranks, either full (`1,5,5,4,1`) or interior (`5,5,4`).
    #[arg(long)]
    pub ranks: Option<String>,
    /// Relative TT-SVD error for sample compression.
    #[arg(long, default_value_t = 1e-2)]
    pub eps: f64,
    #[arg(long, default_value_t = 1.0)]
    pub c: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "random")]
    pub init: Init,
    #[arg(long, default_value_t = 10)]
    pub max_loops: usize,
    /// Stop STTM once training accuracy reaches this fraction.
    #[arg(long, default_value_t = 0.99)]
    pub threshold: f64,
    #[arg(long, default_value_t = 20)]
    pub stm_sweeps: usize,
    /// Skip canonicalization and center shifts (ablation only).
    #[arg(long)]
    pub no_canonical: bool,
    /// Reuse left/right contractions between core updates.
    #[arg(long)]
    pub cache_env: bool,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Also evaluate on the test split.
    #[arg(long)]
    pub eval: bool,
    /// Evaluate STTM on dense test samples instead of compressed ones.
    #[arg(long)]
    pub test_raw: bool,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    #[serde(skip)]
    pub workers: usize,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub test_raw: bool,
    #[arg(long, default_value_t = 0)]
    #[serde(skip)]
    pub workers: usize,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Methods to run in every cell.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "svm,stm,sttm")]
    pub kinds: Vec<Kind>,
    /// Training batch sizes.
    #[arg(long, value_delimiter = ',', required = true)]
    pub batches: Vec<usize>,
    /// Values substituted for the second TT-rank; defaults to the one in `--ranks`.
    #[arg(long, value_delimiter = ',')]
    pub r2: Option<Vec<usize>>,
    /// Seeds per cell, derived from `--seed`.
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    /// Per-class validation samples held out from the end of the training pool.
    #[arg(long, default_value_t = 0)]
    pub validation: usize,
    #[arg(long)]
    pub test_raw: bool,
    /// Cells trained concurrently (0 = all cores).
    #[arg(long, default_value_t = 0)]
    #[serde(skip)]
    pub workers: usize,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    #[serde(skip)]
    pub workers: usize,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug)]
pub struct RerunArgs {
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
}
