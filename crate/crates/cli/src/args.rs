use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "gpda", version, about = "Max-margin deep-kernel GP domain adaptation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write its checkpoint, history and manifest.
    Train(TrainArgs),
    /// Print the accuracy of a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Compare reverse-mode gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Write per-sample certainty scores and their histograms.
    Report(ReportArgs),
    /// Train several methods over several seeds and tabulate accuracies.
    Compare(CompareArgs),
    /// Sweep lambda and/or alpha over grids.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetKind {
    TwoMoons,
    Blobs,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// The documented library defaults.
    Default,
    /// Small relu network tuned for the two-moons task.
    Toy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Source,
    TargetTest,
}

#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    #[arg(long, value_enum)]
    pub dataset: Option<DatasetKind>,
    /// Samples per domain (two-moons).
    #[arg(long)]
    pub n: Option<usize>,
    /// Target rotation in degrees (two-moons).
    #[arg(long, allow_hyphen_values = true)]
    pub rotation: Option<f64>,
    #[arg(long)]
    pub noise_sd: Option<f64>,
    /// Seed of the synthetic data generator.
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Class count (blobs; optional check for csv).
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub n_per_class: Option<usize>,
    /// Target mean shift, comma separated (blobs).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub shift: Option<Vec<f64>>,
    /// Target scale (blobs).
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub source: Option<PathBuf>,
    #[arg(long)]
    pub target_train: Option<PathBuf>,
    #[arg(long)]
    pub target_test: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct HyperArgs {
    /// TOML file with optional [train] and [dataset] tables; a run manifest works too.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub margin: Option<f64>,
    /// Posterior draws per likelihood estimate.
    #[arg(long = "M")]
    pub draws: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub batch_source: Option<usize>,
    #[arg(long)]
    pub batch_target: Option<usize>,
    /// as-written | midpoint
    #[arg(long)]
    pub bayes_mode: Option<String>,
    #[arg(long)]
    pub mcda_n: Option<usize>,
    /// Hidden widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    /// tanh | relu
    #[arg(long)]
    pub activation: Option<String>,
    #[arg(long)]
    pub eval_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// gpda | mcda | source-only | source-only-softmax
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Dataset description to evaluate on; a run manifest works.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "target-test")]
    pub split: Split,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    pub points: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub h: f64,
    /// Relative-error tolerance; defaults to max(1e-4, 1e4·h²).
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the mode stored in the checkpoint.
    #[arg(long)]
    pub bayes_mode: Option<String>,
    #[arg(long, value_enum, default_value = "target-test")]
    pub split: Split,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Training seeds, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Methods, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    pub lambda_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub alpha_grid: Option<Vec<f64>>,
    #[arg(long)]
    pub out: PathBuf,
}
