use std::path::PathBuf;

use amips_core::nets::sizing::{ReinjectPolicy, SizeTag};
use amips_core::nets::Family;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "amips", version, about = "Amortized maximum inner product search experiments")]
pub struct Cli {
    /// Flat key=value file supplying defaults for any flag of the subcommand.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalize and deduplicate an embedding file into an AMIP store.
    Ingest(IngestArgs),
    /// Add noisy copies of queries.
    Augment(AugmentArgs),
    /// Balanced k-means partition of the keys.
    Cluster(ClusterArgs),
    /// Exact per-cluster argmax targets for a query set.
    Targets(TargetsArgs),
    /// Train a SupportNet or KeyNet.
    Train(TrainArgs),
    /// Metrics of a trained model on a query set.
    Eval(EvalArgs),
    /// Routing accuracy against flops for learned and centroid scorers.
    RouteBench(RouteBenchArgs),
    /// Natural and mapped queries on an IVF index over an n_probe sweep.
    IvfBench(IvfBenchArgs),
    /// IVF sweep on queries perturbed by increasing noise.
    OodBench(OodBenchArgs),
    /// Wall time of scores and keys for both model families.
    Timing(TimingArgs),
    /// Write a synthetic clustered key and query set.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Key,
    Query,
}

fn parse_family(s: &str) -> Result<Family, String> {
    s.parse().map_err(|e: amips_core::Error| e.to_string())
}

fn parse_size(s: &str) -> Result<SizeTag, String> {
    s.parse().map_err(|e: amips_core::Error| e.to_string())
}

fn parse_policy(s: &str) -> Result<ReinjectPolicy, String> {
    s.parse().map_err(|e: amips_core::Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// AMIP file, or text with one whitespace- or comma-separated row per line.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "key")]
    pub kind: KindArg,
    #[arg(long, num_args = 0..=1, default_value_t = true, default_missing_value = "true")]
    pub normalize: bool,
    #[arg(long, num_args = 0..=1, default_value_t = true, default_missing_value = "true")]
    pub dedup: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub queries: PathBuf,
    /// Output rows per input row.
    #[arg(long, default_value_t = 10)]
    pub factor: usize,
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[arg(long)]
    pub keys: PathBuf,
    #[arg(long)]
    pub clusters: usize,
    #[arg(long, default_value_t = 5)]
    pub restarts: usize,
    #[arg(long, default_value_t = amips_core::partition::DEFAULT_MAX_ITERS)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TargetsArgs {
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub keys: PathBuf,
    /// Per-cluster targets; global targets without it.
    #[arg(long)]
    pub partition: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ArchArgs {
    #[arg(long, value_parser = parse_family, default_value = "keynet")]
    pub family: Family,
    /// Parameter budget as a fraction of the key set (XS, S, M, L, XL, XXL).
    #[arg(long, value_parser = parse_size)]
    pub size: Option<SizeTag>,
    /// Explicit hidden width instead of a size tag.
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long, default_value_t = 4)]
    pub depth: usize,
    #[arg(long, value_parser = parse_policy, default_value = "every-layer")]
    pub reinject: ReinjectPolicy,
    #[arg(long, num_args = 0..=1, default_value_t = true, default_missing_value = "true")]
    pub residual: bool,
    /// Norm wrapper; on for SupportNet unless set.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub homogenize: Option<bool>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub keys: PathBuf,
    /// Training queries, usually augmented.
    #[arg(long)]
    pub queries: PathBuf,
    /// Precomputed targets for `queries`; computed on the fly without it.
    #[arg(long)]
    pub targets: Option<PathBuf>,
    #[arg(long)]
    pub partition: Option<PathBuf>,
    /// Validation queries evaluated at every log step.
    #[arg(long)]
    pub val_queries: Option<PathBuf>,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[arg(long, default_value_t = 5000)]
    pub steps: usize,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    /// Peak learning rate at the reference batch size.
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.025)]
    pub warmup: f64,
    #[arg(long, default_value_t = 128)]
    pub reference_batch: usize,
    /// EMA decay at the reference batch size.
    #[arg(long, default_value_t = 0.999)]
    pub ema: f64,
    #[arg(long, default_value_t = 50)]
    pub log_every: usize,
    #[arg(long, default_value_t = 0.01)]
    pub w_score: f64,
    #[arg(long, default_value_t = 1.0)]
    pub w_grad: f64,
    #[arg(long, default_value_t = 1.0)]
    pub w_key: f64,
    #[arg(long, default_value_t = 0.01)]
    pub w_consist: f64,
    #[arg(long, default_value_t = 1.0)]
    pub w_nonneg: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Training history CSV.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub keys: PathBuf,
    #[arg(long)]
    pub targets: Option<PathBuf>,
    /// Required for models with more than one cluster.
    #[arg(long)]
    pub partition: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RouteBenchArgs {
    #[arg(long)]
    pub keys: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub partition: PathBuf,
    /// Trained routers; each is labelled by its file stem.
    #[arg(long, value_delimiter = ',')]
    pub models: Vec<PathBuf>,
    /// Largest number of searched clusters; all of them by default.
    #[arg(long)]
    pub k_max: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IvfArgs {
    #[arg(long)]
    pub keys: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    /// Query-mapping models; each is labelled by its file stem.
    #[arg(long, value_delimiter = ',')]
    pub models: Vec<PathBuf>,
    /// Coarse cells; round(sqrt(n)) by default.
    #[arg(long)]
    pub cells: Option<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 4, 8, 16])]
    pub n_probes: Vec<usize>,
    /// Result list sizes.
    #[arg(long, value_delimiter = ',', default_values_t = [10usize])]
    pub ks: Vec<usize>,
    /// Result list sizes as fractions of the key set, emitted alongside `ks`.
    #[arg(long, value_delimiter = ',')]
    pub fractions: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct IvfBenchArgs {
    #[command(flatten)]
    pub ivf: IvfArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OodBenchArgs {
    #[command(flatten)]
    pub ivf: IvfArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.1, 0.2])]
    pub stds: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Natural-minus-mapped gaps; `<out stem>_gaps.csv` by default.
    #[arg(long)]
    pub gaps_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TimingArgs {
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 24)]
    pub width: usize,
    #[arg(long, default_value_t = 4)]
    pub depth: usize,
    #[arg(long, value_parser = parse_policy, default_value = "every-layer")]
    pub reinject: ReinjectPolicy,
    #[arg(long, num_args = 0..=1, default_value_t = true, default_missing_value = "true")]
    pub residual: bool,
    #[arg(long, default_value_t = 1)]
    pub clusters: usize,
    #[arg(long, default_value_t = 1024)]
    pub batch: usize,
    #[arg(long, default_value_t = 20)]
    pub runs: usize,
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 2048)]
    pub keys: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 10)]
    pub components: usize,
    #[arg(long, default_value_t = 0.1)]
    pub key_spread: f64,
    #[arg(long, default_value_t = 0.5)]
    pub query_shift: f64,
    #[arg(long, default_value_t = 0.04)]
    pub query_spread: f64,
    #[arg(long, default_value_t = 4096)]
    pub train_queries: usize,
    #[arg(long, default_value_t = 512)]
    pub val_queries: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Receives keys.amip, train.amip and val.amip.
    #[arg(long)]
    pub out_dir: PathBuf,
}
