//! `vexg`: build, search and benchmark graph indexes over fvecs/bvecs data.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vexg::dataset::Metric;
use vexg::index::ReorderKind;
use vexg::search::EarlyTermination;

use crate::commands::Failure;

#[derive(Parser, Debug)]
#[command(name = "vexg", version, about = "Graph-based approximate nearest-neighbor search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate a vector file (or generate a random one) and write it as fvecs.
    Ingest(IngestArgs),
    /// Exact top-k by full scan, written as ivecs.
    Groundtruth(GroundtruthArgs),
    /// Build an index file.
    Build(BuildArgs),
    /// Search an index; ids go to ivecs, per-query stats to JSON lines.
    Search(SearchArgs),
    /// Recall / throughput sweep over queue sizes.
    Bench(BenchArgs),
    /// Find an early-termination rule for one queue size.
    Tune(TuneArgs),
    /// Compare base, +index, +early_term, +batch and +prefetch configurations.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// fvecs or bvecs input, chosen by extension.
    #[arg(long, conflicts_with = "random", required_unless_present = "random")]
    input: Option<PathBuf>,
    /// Generate this many uniform random vectors instead of reading a file.
    #[arg(long, requires = "dim")]
    random: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Keep only the first N vectors.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GroundtruthArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value = "l2")]
    metric: Metric,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct GraphArgs {
    #[arg(long, default_value = "l2")]
    metric: Metric,
    /// Out-degree M.
    #[arg(long, default_value_t = 32)]
    degree: usize,
    /// Bootstrap kNN width; defaults to the out-degree.
    #[arg(long)]
    knn: Option<usize>,
    #[arg(long, default_value_t = 100)]
    build_ef: usize,
    /// Refinement passes.
    #[arg(long, default_value_t = 2)]
    refine_iters: usize,
    #[arg(long)]
    refine_budget_secs: Option<f64>,
    /// Distance-pruning factor for edge selection.
    #[arg(long, default_value_t = 1.2)]
    prune_alpha: f32,
    /// Use angle-based edge selection with this minimum angle instead.
    #[arg(long)]
    min_angle: Option<f32>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args, Debug)]
struct BuildArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    graph: GraphArgs,
    #[arg(long, default_value = "mst")]
    reorder: ReorderKind,
    /// none, sq8 or pq:<m>.
    #[arg(long, default_value = "none")]
    quantize: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct KernelArgs {
    /// Worker threads; defaults to the available cores.
    #[arg(long, env = "VEXG_WORKERS")]
    workers: Option<usize>,
    /// L1 data cache size used to size distance batches.
    #[arg(long, default_value_t = vexg::distance::DEFAULT_L1D_BYTES)]
    l1d_bytes: usize,
    /// Fraction of the L1 cache a batch may fill.
    #[arg(long, default_value_t = vexg::distance::DEFAULT_CACHE_ALPHA)]
    alpha: f64,
    /// Evaluate neighbor distances one at a time.
    #[arg(long)]
    scalar: bool,
    #[arg(long)]
    prefetch: bool,
}

#[derive(Args, Debug)]
struct SearchArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 100)]
    efs: usize,
    /// Position threshold and patience, e.g. `60,40`. A rule stored by `tune`
    /// for the same efs is used when this is absent.
    #[arg(long, value_parser = parse_early_term)]
    early_term: Option<EarlyTermination>,
    #[arg(long)]
    no_early_term: bool,
    /// Traverse on quantized codes and re-score this many candidates exactly.
    #[arg(long)]
    rerank: Option<usize>,
    #[command(flatten)]
    kernel: KernelArgs,
    /// Result ids as ivecs.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-query statistics as JSON lines; stdout when absent.
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Table,
    Json,
    Jsonl,
    Csv,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    /// Ground truth ivecs; computed by full scan when absent.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "50,100,200")]
    efs: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, value_parser = parse_early_term)]
    early_term: Option<EarlyTermination>,
    #[arg(long)]
    rerank: Option<usize>,
    #[command(flatten)]
    kernel: KernelArgs,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

#[derive(Args, Debug)]
struct TuneArgs {
    #[arg(long)]
    index: PathBuf,
    /// Dry-run queries.
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 100)]
    efs: usize,
    #[arg(long, default_value_t = 0.95)]
    recall_floor: f64,
    #[arg(long)]
    rerank: Option<usize>,
    #[command(flatten)]
    kernel: KernelArgs,
    /// Store the chosen rule in this index file (may equal --index).
    #[arg(long)]
    save: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[command(flatten)]
    graph: GraphArgs,
    #[arg(long, value_delimiter = ',', default_value = "10,20,40,80,160,320")]
    efs: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 0.9)]
    recall_floor: f64,
    #[arg(long, env = "VEXG_WORKERS")]
    workers: Option<usize>,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

fn parse_early_term(s: &str) -> Result<EarlyTermination, String> {
    let (t, tau) = s.split_once(',').ok_or_else(|| format!("expected t,tau but got {s:?}"))?;
    let threshold = t.trim().parse().map_err(|_| format!("bad threshold {t:?}"))?;
    let patience = tau.trim().parse().map_err(|_| format!("bad patience {tau:?}"))?;
    Ok(EarlyTermination { threshold, patience })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(a) => commands::ingest(a),
        Command::Groundtruth(a) => commands::groundtruth(a),
        Command::Build(a) => commands::build(a),
        Command::Search(a) => commands::search(a),
        Command::Bench(a) => commands::bench(a),
        Command::Tune(a) => commands::tune(a),
        Command::Ablate(a) => commands::ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code())
        }
    }
}

impl Failure {
    fn code(&self) -> u8 {
        self.kind as u8
    }
}
