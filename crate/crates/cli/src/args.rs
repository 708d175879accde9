use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// False-positive mining for text-to-image retrieval.
///
/// Config files may be TOML or JSON (chosen by the `.json` extension) and
/// carry the same keys. Precedence, lowest first: built-in defaults, the
/// config file, command-line flags. Exit codes: 0 success, 1 config error,
/// 2 data error, 3 numerical failure.
#[derive(Debug, Parser)]
#[command(name = "fpmine", version)]
pub struct Cli {
    /// Evaluation worker threads [default: all cores]
    #[arg(long, global = true, env = "FPMINE_THREADS")]
    pub threads: Option<usize>,

    /// Suppress progress output on stderr.
    #[arg(long, short, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic image/caption dataset with planted near-duplicates.
    GenData(GenDataArgs),
    /// Train a model; writes checkpoint.bin, log.ndjson and results.json.
    Train(TrainArgs),
    /// Evaluate a checkpoint with Recall@K and optional evidence reports.
    Eval(EvalArgs),
    /// Train and evaluate branch and component variants over several seeds.
    Ablate(AblateArgs),
    /// Compare analytic gradients of the training objective with finite differences.
    Gradcheck(GradcheckArgs),
    /// Re-run a command from its manifest into a new run directory.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub identities: usize,
    #[arg(long, default_value_t = 10)]
    pub per_identity: usize,
    #[arg(long)]
    pub hard_negative_fraction: Option<f64>,
    /// Per-coordinate noise on images and words.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Scale of the per-image nuisance shared across regions.
    #[arg(long)]
    pub nuisance: Option<f64>,
    /// Generator settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Write dataset.bin (no word metadata) instead of dataset.json.
    #[arg(long)]
    pub binary: bool,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Overrides applied on top of a training config file.
#[derive(Debug, Args, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Share of identities held out for validation.
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Validate every N epochs; 0 disables.
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub max_grad_norm: Option<f64>,
    #[arg(long)]
    pub no_global: bool,
    #[arg(long)]
    pub no_local: bool,
    /// Disable the false-positive mining branch.
    #[arg(long)]
    pub no_fpm: bool,
    /// Sum raw word scores instead of masking positives out.
    #[arg(long)]
    pub no_mask: bool,
    #[arg(long)]
    pub no_local_neg_ranking: bool,
    /// Use all cross-identity pairings in a batch instead of one per matched pair.
    #[arg(long)]
    pub unbalanced: bool,
    #[arg(long)]
    pub learnable_boundary: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from the run directory's checkpoint if there is one.
    #[arg(long)]
    pub resume: bool,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    /// Identities held out during training.
    HeldOut,
    /// Every sample in the dataset.
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Score fusion(s): global, local, global+local, local+fpm, full or all
    /// [default: the model's own]
    #[arg(long, value_delimiter = ',')]
    pub fusion: Vec<String>,
    #[arg(long, value_enum, default_value_t = Split::HeldOut)]
    pub split: Split,
    /// Word-level evidence for an `IMAGE,TEXT` pair of sample indices.
    #[arg(long, value_name = "IMAGE,TEXT")]
    pub report: Vec<String>,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Table {
    Branches,
    Components,
    All,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    #[arg(long, value_enum, default_value_t = Table::All)]
    pub table: Table,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset to draw the batch from [default: a small synthetic one]
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    /// Evaluation points tried before giving up on ones away from kinks.
    #[arg(long, default_value_t = 10)]
    pub attempts: usize,
    /// Run directory for the manifest and results.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    /// Run directory for the replayed outputs.
    #[arg(long)]
    pub out: PathBuf,
}
