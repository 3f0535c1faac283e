use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod bench;
mod commands;
mod sweep;

/// Reduced cross-entropy for sequential recommendation.
#[derive(Debug, Parser)]
#[command(name = "rece", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Filter an interaction log, split it and write the manifests.
    Prepare(PrepareArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Ranking metrics of a checkpoint on the test or validation split.
    Eval(EvalArgs),
    /// Run a grid of training configs and collect a quality-vs-memory table.
    Sweep(SweepArgs),
    /// Loss timings or memory-model reports.
    Bench(BenchArgs),
    /// Write a synthetic first-order Markov interaction log.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitKind {
    Temporal,
    Loo,
}

#[derive(Debug, Args)]
struct PrepareArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "tsv")]
    format: rece_core::data::Format,
    #[arg(long, value_enum, default_value = "temporal")]
    split: SplitKind,
    #[arg(long, default_value_t = 0.95)]
    quantile: f64,
    #[arg(long, default_value_t = 5)]
    min_item_count: usize,
    #[arg(long, default_value_t = 20)]
    min_user_count: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Loss names accepted on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossName {
    Ce,
    BcePlus,
    CeSampled,
    Rece,
}

impl LossName {
    pub fn parse(s: &str) -> Result<Self, String> {
        match s {
            "ce" => Ok(LossName::Ce),
            "bce+" => Ok(LossName::BcePlus),
            "ce-" => Ok(LossName::CeSampled),
            "rece" => Ok(LossName::Rece),
            other => Err(format!("unknown loss {other:?}; expected ce, bce+, ce- or rece")),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, value_parser = LossName::parse, default_value = "ce")]
    pub loss: LossName,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 50)]
    pub max_len: usize,
    /// Defaults to the memory-optimal bucket count.
    #[arg(long)]
    pub n_b: Option<usize>,
    /// Defaults to the bucket count.
    #[arg(long)]
    pub n_c: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub n_ec: usize,
    #[arg(long, default_value_t = 1)]
    pub rounds: usize,
    #[arg(long, default_value_t = 256)]
    pub negatives: usize,
    #[arg(long, env = "RECE_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 5)]
    pub patience: usize,
    /// Keep already-seen items among the validation candidates.
    #[arg(long)]
    pub include_seen: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EvalSplit {
    Test,
    Validation,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    k: Vec<usize>,
    #[arg(long, value_enum, default_value = "test")]
    on: EvalSplit,
    #[arg(long)]
    include_seen: bool,
    /// Report file; defaults to `<ckpt>.eval.txt`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// `key=value` blocks separated by blank lines; comma lists expand to
    /// their cartesian product.
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Result table (TSV); rows are appended and completed configs skipped.
    #[arg(long)]
    out: PathBuf,
    /// Run only configs whose grid index is `i` modulo `n`.
    #[arg(long, value_parser = sweep::parse_shard)]
    shard: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BenchMode {
    Loss,
    Memory,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, value_enum)]
    mode: BenchMode,
    /// Rows of X.
    #[arg(long, default_value_t = 2048)]
    m: usize,
    /// Catalog size.
    #[arg(long, default_value_t = 8192)]
    c: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 32)]
    n_b: usize,
    #[arg(long, value_delimiter = ',', default_value = "32")]
    n_c: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    n_ec: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    rounds: Vec<usize>,
    #[arg(long, default_value_t = 256)]
    negatives: usize,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, env = "RECE_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    items: usize,
    #[arg(long, default_value_t = 5000)]
    users: usize,
    #[arg(long, default_value_t = 20)]
    min_len: usize,
    #[arg(long, default_value_t = 40)]
    max_len: usize,
    #[arg(long, env = "RECE_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare(a) => commands::prepare(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => sweep::run(a),
        Command::Bench(a) => bench::run(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
