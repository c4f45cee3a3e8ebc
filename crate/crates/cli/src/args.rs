use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "lipcert", version, about = "Lipschitz bounds, certified radii and certified-radius training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Whole-network and pairwise Lipschitz bounds of a model.
    Bound(BoundArgs),
    /// Certified radii and certified accuracy on a dataset.
    Certify(CertifyArgs),
    /// Train a dense model with the certified-radius loss.
    Train(TrainArgs),
    /// l2 PGD attack, cross-checked against the certificates.
    Attack(AttackArgs),
    /// Average pairwise bounds for every method and pairwise mode.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GChoice {
    Hinge,
    Exp,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Root seed for every random stream.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; falls back to LIPCERT_THREADS, then the CPU count.
    #[arg(long, env = "LIPCERT_THREADS")]
    pub workers: Option<usize>,
    #[arg(long, default_value_t = 500)]
    pub power_iters: usize,
    #[arg(long, default_value_t = 1e-12)]
    pub power_tol: f64,
    /// Output file; format follows the extension unless --format is given.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Record wall-clock times in outputs (makes them non-reproducible).
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// IDX directory, or `moons:N:NOISE:SEED`.
    #[arg(long)]
    pub data: String,
    #[arg(long, value_enum)]
    pub split: Option<Split>,
    /// Keep only these classes (relabelled in ascending order), e.g. `0,1`.
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<usize>>,
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BoundSpec {
    #[arg(long, default_value = "liplt")]
    pub method: String,
    #[arg(long, default_value = "direct")]
    pub mode: String,
}

#[derive(Debug, Args)]
pub struct BoundArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub bound: BoundSpec,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct CertifyArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub eps: f64,
    /// Soft-radius temperature.
    #[arg(long = "t", default_value_t = 10.0)]
    pub temperature: f64,
    #[command(flatten)]
    pub bound: BoundSpec,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Validation data (same syntax as --data); IDX directories default to
    /// their test split.
    #[arg(long)]
    pub val: Option<String>,
    /// Initial model; otherwise a fresh relu MLP with --hidden widths.
    #[arg(long, conflicts_with = "hidden")]
    pub model: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0.0)]
    pub eps: f64,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, value_enum, default_value_t = GChoice::Hinge)]
    pub g: GChoice,
    /// Hinge target (or exp scale); defaults to 2·eps (or eps).
    #[arg(long)]
    pub rbar: Option<f64>,
    #[arg(long = "t", default_value_t = 10.0)]
    pub temperature: f64,
    #[command(flatten)]
    pub bound: BoundSpec,
    /// Power iterations per norm inside training steps.
    #[arg(long, default_value_t = 10)]
    pub train_power_iters: usize,
    /// Per-epoch metrics CSV.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub eps: f64,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 10)]
    pub restarts: usize,
    /// Defaults to 2.5·eps/steps.
    #[arg(long)]
    pub step_size: Option<f64>,
    #[command(flatten)]
    pub bound: BoundSpec,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "naive,liplt")]
    pub methods: Vec<String>,
    #[command(flatten)]
    pub common: Common,
}
