use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::time::Duration;

use anyhow::Context;
use serde_json::json;
use vexg::bench::{ablate as run_ablation, ground_truth, run_bench, BenchError, SweepConfig};
use vexg::dataset::{load_bvecs, load_fvecs, load_ivecs, save_fvecs, save_ivecs, DataError, QuerySet, RawVectors, VectorDataset};
use vexg::distance::{BatchSpec, Prefetch};
use vexg::graph::{
    build_knn_graph, choose_entry, ensure_reachability, initial_graph, random_points, refine, BuildParams, EdgeSelection,
    GraphError,
};
use vexg::index::{Index, IndexError, Scoring};
use vexg::persistence::{load_index, save_index, PersistError};
use vexg::quantization::{CodecKind, QuantError};
use vexg::reorder::ReorderError;
use vexg::search::{SearchError, SearchParams};
use vexg::tune::{tune_early_term, TuneSetup};

use crate::{AblateArgs, BenchArgs, BuildArgs, Format, GraphArgs, GroundtruthArgs, IngestArgs, KernelArgs, SearchArgs, TuneArgs};

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Kind {
    Other = 1,
    Usage = 2,
    Data = 3,
    Invariant = 4,
}

pub struct Failure {
    pub kind: Kind,
    pub error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure { kind: classify(&error), error }
    }
}

#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn graph_kind(e: &GraphError) -> Kind {
    match e {
        GraphError::InvalidParams(_) => Kind::Usage,
        GraphError::TooFewPoints { .. } => Kind::Data,
        _ => Kind::Invariant,
    }
}

fn quant_kind(e: &QuantError) -> Kind {
    match e {
        QuantError::InvalidSubspaces { .. } => Kind::Usage,
        QuantError::TooFewPoints(_) | QuantError::DimensionMismatch { .. } => Kind::Data,
        _ => Kind::Invariant,
    }
}

fn search_kind(e: &SearchError) -> Kind {
    match e {
        SearchError::InvalidParams(_) => Kind::Usage,
        SearchError::UnpaddedQuery { .. } => Kind::Data,
        SearchError::SizeMismatch { .. } => Kind::Invariant,
    }
}

fn index_kind(e: &IndexError) -> Kind {
    match e {
        IndexError::Data(_) => Kind::Data,
        IndexError::Graph(g) => graph_kind(g),
        IndexError::Quant(q) => quant_kind(q),
        IndexError::Search(s) => search_kind(s),
        IndexError::WrongState { .. } | IndexError::NoCodes => Kind::Usage,
        IndexError::Reorder(_) | IndexError::Inconsistent(_) => Kind::Invariant,
    }
}

fn classify(error: &anyhow::Error) -> Kind {
    for cause in error.chain() {
        if cause.is::<UsageError>() {
            return Kind::Usage;
        }
        if cause.is::<DataError>() || cause.is::<PersistError>() || cause.is::<io::Error>() {
            return Kind::Data;
        }
        if let Some(e) = cause.downcast_ref::<IndexError>() {
            return index_kind(e);
        }
        if let Some(e) = cause.downcast_ref::<BenchError>() {
            return match e {
                BenchError::EmptyEfs | BenchError::KAboveEfs { .. } => Kind::Usage,
                BenchError::TruthMismatch { .. } => Kind::Data,
                BenchError::Index(i) => index_kind(i),
            };
        }
        if let Some(e) = cause.downcast_ref::<GraphError>() {
            return graph_kind(e);
        }
        if let Some(e) = cause.downcast_ref::<SearchError>() {
            return search_kind(e);
        }
        if let Some(e) = cause.downcast_ref::<QuantError>() {
            return quant_kind(e);
        }
        if cause.is::<ReorderError>() {
            return Kind::Invariant;
        }
    }
    Kind::Other
}

type Outcome = Result<(), Failure>;

fn load_vectors(path: &Path) -> anyhow::Result<RawVectors> {
    let raw = match path.extension().and_then(|e| e.to_str()) {
        Some("bvecs") => load_bvecs(path),
        _ => load_fvecs(path),
    };
    raw.with_context(|| format!("reading {}", path.display()))
}

fn load_queries(path: &Path, base: &VectorDataset) -> anyhow::Result<QuerySet> {
    let raw = load_vectors(path)?;
    QuerySet::build(&raw, base).with_context(|| format!("preparing queries from {}", path.display()))
}

fn open_index(path: &Path) -> anyhow::Result<Index> {
    load_index(path).with_context(|| format!("loading index {}", path.display()))
}

fn truth_for(path: Option<&Path>, index: &Index, queries: &QuerySet, k: usize) -> anyhow::Result<Vec<Vec<u32>>> {
    match path {
        Some(p) => load_ivecs(p).with_context(|| format!("reading {}", p.display())),
        None => {
            log::info!("computing ground truth for {} queries by full scan", queries.len());
            Ok(ground_truth(&index.original_data(), queries, k))
        }
    }
}

fn workers(requested: Option<usize>) -> usize {
    requested.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, usize::from)).max(1)
}

fn scoring(rerank: Option<usize>) -> Scoring {
    rerank.map_or(Scoring::Exact, |rerank| Scoring::Codes { rerank })
}

fn kernel_params(k: usize, efs: usize, kernel: &KernelArgs, padded_dim: usize) -> SearchParams {
    let batch = if kernel.scalar {
        BatchSpec::SCALAR
    } else {
        BatchSpec::from_cache(kernel.l1d_bytes, padded_dim, 4, kernel.alpha)
    };
    SearchParams::new(k, efs)
        .with_batch(batch)
        .with_prefetch(if kernel.prefetch { Prefetch::On } else { Prefetch::Off })
}

fn build_params(g: &GraphArgs) -> anyhow::Result<BuildParams> {
    let selection = match g.min_angle {
        Some(min_angle_degrees) => EdgeSelection::AnglePrune { min_angle_degrees },
        None => EdgeSelection::DistancePrune { alpha: g.prune_alpha },
    };
    let refine_budget = match g.refine_budget_secs {
        Some(s) if !(s.is_finite() && s >= 0.0) => return Err(usage(format!("bad refine budget {s}"))),
        s => s.map(Duration::from_secs_f64),
    };
    let params = BuildParams {
        max_degree: g.degree,
        knn: g.knn.unwrap_or(g.degree),
        build_ef: g.build_ef,
        refine_iters: g.refine_iters,
        selection,
        seed: g.seed,
        refine_budget,
    };
    params.validate()?;
    Ok(params)
}

fn emit(line: &serde_json::Value) {
    println!("{line}");
}

pub fn ingest(a: IngestArgs) -> Outcome {
    let mut raw = match (&a.input, a.random) {
        (Some(path), _) => load_vectors(path)?,
        (None, Some(n)) => {
            let dim = a.dim.filter(|&d| d > 0).ok_or_else(|| usage("--dim must be positive"))?;
            if n == 0 {
                return Err(usage("--random must be positive").into());
            }
            RawVectors::from_rows(&random_points(n, dim, a.seed)).map_err(anyhow::Error::from)?
        }
        (None, None) => return Err(usage("either --input or --random is required").into()),
    };
    if let Some(limit) = a.limit {
        raw.truncate(limit);
    }
    if let Some(i) = raw.values().iter().position(|v| !v.is_finite()) {
        return Err(Failure {
            kind: Kind::Data,
            error: anyhow::anyhow!("vector {} holds a non-finite value", i / raw.dim()),
        });
    }
    save_fvecs(&a.out, &raw).map_err(anyhow::Error::from)?;
    emit(&json!({ "out": a.out, "n": raw.len(), "dim": raw.dim() }));
    Ok(())
}

pub fn groundtruth(a: GroundtruthArgs) -> Outcome {
    if a.k == 0 {
        return Err(usage("--k must be positive").into());
    }
    let data = VectorDataset::build(&load_vectors(&a.data)?, a.metric).map_err(anyhow::Error::from)?;
    let queries = load_queries(&a.queries, &data)?;
    let truth = ground_truth(&data, &queries, a.k);
    save_ivecs(&a.out, &truth).map_err(anyhow::Error::from)?;
    emit(&json!({ "out": a.out, "queries": truth.len(), "k": a.k.min(data.len()), "metric": a.metric.to_string() }));
    Ok(())
}

pub fn build(a: BuildArgs) -> Outcome {
    let params = build_params(&a.graph)?;
    let codec = match a.quantize.as_str() {
        "none" => None,
        s => Some(s.parse::<CodecKind>().map_err(usage)?),
    };
    let data = VectorDataset::build(&load_vectors(&a.data)?, a.graph.metric).map_err(anyhow::Error::from)?;
    let (index, summary) = Index::build(data, &params, a.reorder, codec).map_err(anyhow::Error::from)?;
    let graph = index.graph();
    let max_out = (0..graph.len() as u32).map(|v| graph.neighbors(v).len()).max().unwrap_or(0);
    let reachable = graph.reachable_count();
    if max_out > graph.degree() || reachable != graph.len() {
        return Err(Failure {
            kind: Kind::Invariant,
            error: anyhow::anyhow!("built graph violates invariants: max out-degree {max_out}, {reachable} reachable"),
        });
    }
    save_index(&index, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    emit(&json!({
        "out": a.out,
        "n": index.len(),
        "dim": index.data().dim(),
        "metric": index.metric().to_string(),
        "degree": graph.degree(),
        "max_out_degree": max_out,
        "mean_degree": summary.graph.mean_degree,
        "reachable": reachable,
        "entry": graph.entry(),
        "refine_passes": summary.graph.refine.passes,
        "refine_changed_rows": summary.graph.refine.changed_rows,
        "reachability_edges": summary.graph.reachability_edges,
        "reorder": summary.reorder.to_string(),
        "bandwidth_before": summary.bandwidth_before,
        "bandwidth_after": summary.bandwidth_after,
        "mean_span_before": summary.mean_span_before,
        "mean_span_after": summary.mean_span_after,
        "codec": summary.codec,
        "build_secs": summary.graph.build_secs,
    }));
    Ok(())
}

pub fn search(a: SearchArgs) -> Outcome {
    let index = open_index(&a.index)?;
    let queries = load_queries(&a.queries, index.data())?;
    let stored = index.early_term().filter(|t| t.ef == a.efs).map(|t| t.rule());
    let early_term = if a.no_early_term { None } else { a.early_term.or(stored) };
    let params = kernel_params(a.k, a.efs, &a.kernel, index.data().padded_dim()).with_early_term(early_term);
    let nt = workers(a.kernel.workers);
    let out = index.batch_search(&queries, &params, scoring(a.rerank), nt).map_err(anyhow::Error::from)?;

    if let Some(path) = &a.out {
        save_ivecs(path, &out.id_matrix()).map_err(anyhow::Error::from)?;
    }
    let mut sink: Box<dyn Write> = match &a.stats {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(io::stdout().lock()),
    };
    let write = |sink: &mut Box<dyn Write>, v: serde_json::Value| writeln!(sink, "{v}").context("writing stats");
    for (i, (r, lat)) in out.results.iter().zip(&out.latencies).enumerate() {
        write(
            &mut sink,
            json!({
                "type": "query",
                "query": i,
                "distance_computations": r.stats.distance_computations,
                "hops": r.stats.hops,
                "latency_us": lat.as_secs_f64() * 1e6,
                "terminated_early": r.stats.terminated_early,
                "nearest": r.ids.first(),
                "nearest_distance": r.distances.first(),
            }),
        )?;
    }
    write(
        &mut sink,
        json!({
            "type": "summary",
            "queries": out.results.len(),
            "k": a.k,
            "efs": a.efs,
            "workers": nt,
            "batch_width": params.batch.effective_width(index.graph().degree()),
            "early_term": early_term.map(|e| [e.threshold, e.patience]),
            "qps": out.qps(),
            "mean_distance_computations": out.mean_distance_computations(),
            "mean_hops": out.mean_hops(),
            "distance": if index.metric().is_euclidean() { "squared euclidean" } else { "negative inner product" },
        }),
    )?;
    sink.flush().context("writing stats")?;
    Ok(())
}

fn dataset_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned())
}

pub fn bench(a: BenchArgs) -> Outcome {
    if a.efs.is_empty() {
        return Err(usage("the efs list is empty").into());
    }
    let index = open_index(&a.index)?;
    let queries = load_queries(&a.queries, index.data())?;
    let truth = truth_for(a.truth.as_deref(), &index, &queries, a.k)?;
    let base = kernel_params(a.k, a.k, &a.kernel, index.data().padded_dim());
    let config = SweepConfig {
        k: a.k,
        workers: workers(a.kernel.workers),
        batch: base.batch,
        prefetch: base.prefetch,
        early_term: a.early_term,
        scoring: scoring(a.rerank),
    };
    let report = run_bench(&index, &queries, &truth, &a.efs, &config, &dataset_name(&a.index))
        .map_err(anyhow::Error::from)?;
    match a.format {
        Format::Table => {
            println!("{}", serde_json::to_string(&report.env).map_err(anyhow::Error::from)?);
            print!("{}", report.to_table());
            for w in &report.warnings {
                println!("warning: {w}");
            }
        }
        Format::Json => println!("{}", report.to_json()),
        Format::Jsonl => print!("{}", report.to_json_lines()),
        Format::Csv => print!("{}", report.to_csv()),
    }
    Ok(())
}

pub fn tune(a: TuneArgs) -> Outcome {
    let mut index = open_index(&a.index)?;
    let queries = load_queries(&a.queries, index.data())?;
    let truth = truth_for(a.truth.as_deref(), &index, &queries, a.k)?;
    let base = kernel_params(a.k, a.efs, &a.kernel, index.data().padded_dim());
    let setup = TuneSetup {
        k: a.k,
        ef: a.efs,
        recall_floor: a.recall_floor,
        base,
        scoring: scoring(a.rerank),
        workers: workers(a.kernel.workers),
    };
    let report = tune_early_term(&index, &queries, &truth, setup).map_err(anyhow::Error::from)?;
    emit(&json!({
        "efs": report.ef,
        "k": report.k,
        "recall_floor": report.recall_floor,
        "baseline_recall": report.baseline_recall,
        "baseline_distance_computations": report.baseline_distance_computations,
        "chosen": report.chosen,
        "savings": report.savings(),
        "trials": report.trials.len(),
    }));
    match (report.tuned(), &a.save) {
        (None, _) => log::warn!("no rule reaches recall {} at efs {}", a.recall_floor, a.efs),
        (Some(t), Some(path)) => {
            index.set_early_term(Some(t)).map_err(anyhow::Error::from)?;
            save_index(&index, path).with_context(|| format!("writing {}", path.display()))?;
        }
        (Some(_), None) => {}
    }
    Ok(())
}

pub fn ablate(a: AblateArgs) -> Outcome {
    if a.efs.is_empty() {
        return Err(usage("the efs list is empty").into());
    }
    let params = build_params(&a.graph)?;
    let data = VectorDataset::build(&load_vectors(&a.data)?, a.graph.metric).map_err(anyhow::Error::from)?;
    let queries = load_queries(&a.queries, &data)?;
    let knn = build_knn_graph(&data, params.knn, params.seed).map_err(anyhow::Error::from)?;
    let mut base = initial_graph(&data, &knn, &params, choose_entry(&data));
    let mut refined = base.clone();
    refine(&mut refined, &data, &params);
    ensure_reachability(&mut base, &data);
    ensure_reachability(&mut refined, &data);
    let unrefined = Index::new(base, data.clone()).map_err(anyhow::Error::from)?;
    let refined = Index::new(refined, data).map_err(anyhow::Error::from)?;
    let truth = truth_for(a.truth.as_deref(), &refined, &queries, a.k)?;
    let report = run_ablation(&unrefined, &refined, &queries, &truth, &a.efs, a.k, a.recall_floor, workers(a.workers))
        .map_err(anyhow::Error::from)?;
    match a.format {
        Format::Table => print!("{}", report.to_table()),
        Format::Json => println!("{}", serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?),
        Format::Jsonl => {
            for row in &report.rows {
                emit(&serde_json::to_value(row).map_err(anyhow::Error::from)?);
            }
        }
        Format::Csv => {
            println!("config,efs,recall,qps,mean_distance_computations,mean_hops,qps_gain,distance_ratio");
            for r in &report.rows {
                println!(
                    "{},{},{:.6},{:.2},{:.2},{:.2},{:.4},{:.4}",
                    r.name, r.efs, r.recall, r.qps, r.mean_distance_computations, r.mean_hops, r.qps_gain, r.distance_ratio
                );
            }
        }
    }
    Ok(())
}
