//! Command-line surface. Flag overrides beat the config file, which beats
//! the built-in defaults.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "msgc",
    about = "Multi-spatial graph convolution Seq2Seq traffic forecasting",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic sensor network and speed series.
    Synth(SynthArgs),
    /// Learn and persist spatial and temporal embeddings.
    Embed(EmbedArgs),
    /// Train a model; writes checkpoint, resume state and history.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split, next to the HA baseline.
    Evaluate(EvaluateArgs),
    /// Emit prediction CSVs from a checkpoint without metrics.
    Predict(PredictArgs),
    /// Dump the spatial matrices (adjacency, normalized, trend, reachability).
    Matrices(MatricesArgs),
    /// Fault-tolerance and data-sparsity experiment suites.
    Stress(StressArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// JSON config file; omitted fields use defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the run seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the maximum number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Override the initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Override the batch size.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Disable a mechanism (repeatable).
    #[arg(long = "ablate", value_enum)]
    pub ablate: Vec<Ablation>,
    /// Use a linear output head instead of the ReLU head.
    #[arg(long)]
    pub linear_head: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    TemporalEmb,
    SpatialEmb,
    Semantic,
    Adjacent,
    Reachability,
    TemporalAttention,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    pub nodes: usize,
    #[arg(long, default_value_t = 28)]
    pub days: usize,
    /// Time granularity in minutes.
    #[arg(long, default_value_t = 5)]
    pub delta: u32,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Strength of the lagged diffusion echo.
    #[arg(long)]
    pub diffusion: Option<f64>,
    /// Amplitude of the shared daily profile.
    #[arg(long)]
    pub amplitude: Option<f64>,
    /// White measurement noise level.
    #[arg(long)]
    pub noise: Option<f64>,
    /// AR(1) coefficient of the per-node fluctuation.
    #[arg(long)]
    pub ar_coeff: Option<f64>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub distances: PathBuf,
    #[arg(long)]
    pub nodes: PathBuf,
    /// Readings file used to cross-check the slot count against the data.
    #[arg(long)]
    pub readings: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub readings: PathBuf,
    #[arg(long)]
    pub distances: PathBuf,
    #[arg(long)]
    pub nodes: PathBuf,
    /// Explicit travel-time file overriding the speed-derived matrix.
    #[arg(long)]
    pub travel_times: Option<PathBuf>,
    /// Precomputed spatial embedding CSV.
    #[arg(long)]
    pub sp: Option<PathBuf>,
    /// Precomputed temporal embedding CSV.
    #[arg(long)]
    pub tp: Option<PathBuf>,
    /// Resume from a state.json written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub readings: PathBuf,
    #[arg(long)]
    pub nodes: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub readings: PathBuf,
    #[arg(long)]
    pub nodes: PathBuf,
    /// Which split's windows to predict.
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    pub split: SplitArg,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct MatricesArgs {
    #[arg(long)]
    pub readings: PathBuf,
    #[arg(long)]
    pub distances: PathBuf,
    #[arg(long)]
    pub nodes: PathBuf,
    #[arg(long)]
    pub travel_times: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StressMode {
    Fault,
    Sparsity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SubsampleArg {
    Prefix,
    Window,
}

#[derive(Debug, Args)]
pub struct StressArgs {
    #[arg(long, value_enum)]
    pub mode: StressMode,
    /// Comma-separated levels (fault ratios or data proportions).
    #[arg(long, value_delimiter = ',', required = true)]
    pub levels: Vec<f64>,
    /// Comma-separated run seeds.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub readings: PathBuf,
    #[arg(long)]
    pub distances: PathBuf,
    #[arg(long)]
    pub nodes: PathBuf,
    #[arg(long)]
    pub travel_times: Option<PathBuf>,
    /// Evaluate an existing checkpoint with faults injected into the test
    /// rows only, instead of retraining per level.
    #[arg(long)]
    pub eval_only: bool,
    /// Checkpoint for --eval-only.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// How sparsity subsets pick their days.
    #[arg(long, value_enum, default_value_t = SubsampleArg::Prefix)]
    pub subsample_mode: SubsampleArg,
    #[arg(long)]
    pub quiet: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}
