//! `gid`: build intent-discovery benchmarks from embedding files, train and
//! evaluate discovery models, and export report tables.

mod commands;
mod conf;
mod pca;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "gid", version, about = "Generalized intent discovery over embedding vectors")]
struct Cli {
    /// Config file of `key = value` lines; defaults to ./gid.conf when present.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Draw a labeled Gaussian-blob dataset
    #[command(args_override_self = true)]
    Synth(SynthArgs),
    /// Partition a labeled dataset into IND and OOD classes
    #[command(args_override_self = true)]
    Split(SplitArgs),
    /// Derive an imbalanced or noisy variant of a split
    #[command(args_override_self = true)]
    Variant(VariantArgs),
    /// Train a discovery model on a split
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Score a predictions file
    #[command(args_override_self = true)]
    Eval(EvalArgs),
    /// Estimate the number of clusters in a dataset
    #[command(name = "estimate-k", args_override_self = true)]
    EstimateK(EstimateKArgs),
    /// Export metric tables, loss curves and 2-D projections of runs
    #[command(args_override_self = true)]
    Report(ReportArgs),
}

#[derive(Debug, clap::Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub classes: usize,
    #[arg(long)]
    pub per_class: usize,
    #[arg(long)]
    pub dim: usize,
    /// Distance between class means in within-class standard deviations.
    #[arg(long)]
    pub sep: f64,
    #[arg(long, default_value_t = 1.0)]
    pub std: f64,
    /// Spread classes over this many domains, in contiguous blocks.
    #[arg(long)]
    pub domains: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Prefix for sample ids, so several files can feed one split.
    #[arg(long)]
    pub id_prefix: Option<String>,
    /// Drop labels (for out-of-scope noise pools).
    #[arg(long, num_args = 0..=1, default_missing_value = "true", default_value_t = false)]
    pub unlabeled: bool,
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Binary,
    Jsonl,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    #[value(alias = "single-domain")]
    Sd,
    #[value(alias = "multi-domain")]
    Md,
    #[value(alias = "cross-domain")]
    Cd,
}

#[derive(Debug, clap::Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "sd")]
    pub mode: ModeArg,
    #[arg(long)]
    pub ood_ratio: f64,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub ind_samples_per_class: Option<usize>,
    /// Also write the IND samples left out of every partition as a dataset.
    #[arg(long, value_name = "PATH")]
    pub held_out: Option<PathBuf>,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum)]
pub enum KindArg {
    OodNoise,
    IndNoise,
    Imbalance,
}

#[derive(Debug, clap::Args)]
pub struct VariantArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum)]
    pub kind: KindArg,
    /// Imbalance ratio n_max / n_min.
    #[arg(long)]
    pub rho: Option<f64>,
    /// Noise samples as a fraction of the OOD training count.
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Dataset the noise samples are drawn from; IND noise defaults to the
    /// IND samples the split left out.
    #[arg(long)]
    pub pool: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub method: gid_core::Method,
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// Comma-separated seeds; metrics are aggregated as mean and std.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Run the seeds concurrently (results are identical).
    #[arg(long, num_args = 0..=1, default_missing_value = "true", default_value_t = false)]
    pub parallel: bool,
    /// Directory for per-seed reports, curves, predictions and checkpoints.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Debug, Default, clap::Args)]
pub struct HyperArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_base: Option<f64>,
    #[arg(long)]
    pub lr_min: Option<f64>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub dropout_p: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub sk_iters: Option<usize>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub kmeans_restarts: Option<usize>,
    #[arg(long)]
    pub encoder_layers: Option<usize>,
    #[arg(long)]
    pub repr_dim: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub hard_pseudo_labels: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub sk_standardize: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub mix_gold_ind: Option<bool>,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    /// CSV with columns id,gold,predicted.
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub n_ind: usize,
    #[arg(long)]
    pub n_ood: usize,
    /// Map every predicted class, IND included, to gold.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", default_value_t = false)]
    pub map_all: bool,
    /// Write the mapped confusion matrix here.
    #[arg(long, value_name = "PATH")]
    pub confusion: Option<PathBuf>,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct EstimateKArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub k_prime: usize,
    /// Minimum kept cluster size; defaults to n / k_prime.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, default_value_t = 10)]
    pub restarts: usize,
    /// Encode the vectors with this model first.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, clap::Args)]
pub struct ReportArgs {
    /// Per-seed run directories written by `train --out-dir`.
    #[arg(long = "run", required = true, value_name = "DIR")]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Also write silhouette values between every pair of test domains.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", default_value_t = false)]
    pub domain_sc: bool,
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn threads() -> anyhow::Result<usize> {
    match std::env::var("GID_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => anyhow::bail!("GID_THREADS must be a positive integer, got {v:?}"),
        },
        Err(_) => Ok(1),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();

    let cwd = std::env::current_dir().unwrap_or_else(|_| PathBuf::from("."));
    let args = match conf::merge(&Cli::command(), std::env::args_os().collect(), &cwd) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };

    let run = || -> anyhow::Result<()> {
        rayon::ThreadPoolBuilder::new().num_threads(threads()?).build_global()?;
        match cli.command {
            Command::Synth(a) => commands::synth(&a),
            Command::Split(a) => commands::split(&a),
            Command::Variant(a) => commands::variant(&a),
            Command::Train(a) => commands::train(&a),
            Command::Eval(a) => commands::eval(&a),
            Command::EstimateK(a) => commands::estimate_k(&a),
            Command::Report(a) => commands::report(&a),
        }
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if e.is::<commands::UsageError>() { 2 } else { 1 })
        }
    }
}
