//! Ground truth, recall, throughput sweeps and the ablation ladder.

use std::fmt::Write as _;
use std::time::Duration;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::dataset::{Metric, QuerySet, VectorDataset};
use crate::distance::{BatchSpec, Prefetch};
use crate::index::{Index, IndexError, Scoring};
use crate::search::{BatchOutput, SearchParams};
use crate::tune::{tune_early_term, TuneReport, TuneSetup};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("the efs list is empty")]
    EmptyEfs,
    #[error("k = {k} exceeds efs = {efs}")]
    KAboveEfs { k: usize, efs: usize },
    #[error("ground truth has {truth} rows for {queries} queries")]
    TruthMismatch { truth: usize, queries: usize },
    #[error(transparent)]
    Index(#[from] IndexError),
}

fn exact_distance(q: &[f32], x: &[f32], metric: Metric) -> f64 {
    match metric {
        Metric::NegativeInnerProduct => -q.iter().zip(x).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum::<f64>(),
        _ => q.iter().zip(x).map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2)).sum(),
    }
}

/// Exact top-`k` ids of one query by full scan in double precision, ties by lower id.
pub fn exact_top_k(data: &VectorDataset, query: &[f32], k: usize) -> Vec<u32> {
    let mut all: Vec<(f64, u32)> =
        (0..data.len()).map(|i| (exact_distance(query, data.vector(i), data.metric()), i as u32)).collect();
    let cmp = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    let k = k.min(all.len());
    if k == 0 {
        return Vec::new();
    }
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, cmp);
        all.truncate(k);
    }
    all.sort_by(cmp);
    all.into_iter().map(|(_, id)| id).collect()
}

/// Exact top-`k` for every query, parallel across queries.
pub fn ground_truth(data: &VectorDataset, queries: &QuerySet, k: usize) -> Vec<Vec<u32>> {
    (0..queries.len()).into_par_iter().map(|i| exact_top_k(data, queries.query(i), k)).collect()
}

/// `|first k of result ∩ first k of truth| / k`.
pub fn recall_at_k(result: &[u32], truth: &[u32], k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let truth = &truth[..k.min(truth.len())];
    let hits = result.iter().take(k).filter(|id| truth.contains(id)).count();
    hits as f64 / k as f64
}

pub fn mean_recall(results: &[Vec<u32>], truth: &[Vec<u32>], k: usize) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    results.iter().zip(truth).map(|(r, t)| recall_at_k(r, t, k)).sum::<f64>() / results.len() as f64
}

/// Nearest-rank percentile in microseconds.
pub fn percentile_us(latencies: &[Duration], pct: f64) -> f64 {
    if latencies.is_empty() {
        return 0.0;
    }
    let mut us: Vec<f64> = latencies.iter().map(|d| d.as_secs_f64() * 1e6).collect();
    us.sort_by(f64::total_cmp);
    let rank = ((pct / 100.0) * us.len() as f64).ceil().max(1.0) as usize;
    us[rank.min(us.len()) - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub efs: usize,
    pub recall: f64,
    pub qps: f64,
    pub mean_distance_computations: f64,
    pub mean_hops: f64,
    pub p50_us: f64,
    pub p99_us: f64,
    /// Query count over summed per-query latency, scaled by worker count.
    pub latency_qps: f64,
}

impl BenchRow {
    pub fn from_output(efs: usize, out: &BatchOutput, truth: &[Vec<u32>], k: usize, workers: usize) -> Self {
        let busy: f64 = out.latencies.iter().map(Duration::as_secs_f64).sum();
        Self {
            efs,
            recall: mean_recall(&out.id_matrix(), truth, k),
            qps: out.qps(),
            mean_distance_computations: out.mean_distance_computations(),
            mean_hops: out.mean_hops(),
            p50_us: percentile_us(&out.latencies, 50.0),
            p99_us: percentile_us(&out.latencies, 99.0),
            latency_qps: if busy > 0.0 { out.results.len() as f64 * workers.min(out.results.len()).max(1) as f64 / busy } else { 0.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchEnv {
    pub dataset: String,
    pub n: usize,
    pub dim: usize,
    pub metric: String,
    pub degree: usize,
    pub queries: usize,
    pub k: usize,
    pub workers: usize,
    pub batch_width: usize,
    pub prefetch: bool,
    pub early_term: Option<(usize, usize)>,
    pub scoring: String,
    pub reordered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub env: BenchEnv,
    pub rows: Vec<BenchRow>,
    pub warnings: Vec<String>,
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Environment line followed by one line per row.
    pub fn to_json_lines(&self) -> String {
        let mut s = serde_json::to_string(&self.env).expect("env serializes");
        s.push('\n');
        for row in &self.rows {
            s.push_str(&serde_json::to_string(row).expect("row serializes"));
            s.push('\n');
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("efs,recall,qps,mean_distance_computations,mean_hops,p50_us,p99_us\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.6},{:.2},{:.2},{:.2},{:.2},{:.2}",
                r.efs, r.recall, r.qps, r.mean_distance_computations, r.mean_hops, r.p50_us, r.p99_us
            );
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:>6} {:>8} {:>12} {:>10} {:>8} {:>10} {:>10}\n",
            "efs", "recall", "qps", "dist_comp", "hops", "p50_us", "p99_us"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>6} {:>8.4} {:>12.1} {:>10.1} {:>8.1} {:>10.1} {:>10.1}",
                r.efs, r.recall, r.qps, r.mean_distance_computations, r.mean_hops, r.p50_us, r.p99_us
            );
        }
        s
    }
}

/// Search configuration shared by every row of a sweep.
#[derive(Debug, Clone, Copy)]
pub struct SweepConfig {
    pub k: usize,
    pub workers: usize,
    pub batch: BatchSpec,
    pub prefetch: Prefetch,
    pub early_term: Option<crate::search::EarlyTermination>,
    pub scoring: Scoring,
}

impl SweepConfig {
    pub fn new(k: usize) -> Self {
        Self { k, workers: 1, batch: BatchSpec::SCALAR, prefetch: Prefetch::Off, early_term: None, scoring: Scoring::Exact }
    }

    pub fn params(&self, efs: usize) -> SearchParams {
        SearchParams::new(self.k, efs)
            .with_batch(self.batch)
            .with_prefetch(self.prefetch)
            .with_early_term(self.early_term)
    }
}

fn check_inputs(queries: &QuerySet, truth: &[Vec<u32>]) -> Result<(), BenchError> {
    if truth.len() != queries.len() {
        return Err(BenchError::TruthMismatch { truth: truth.len(), queries: queries.len() });
    }
    Ok(())
}

/// One row per `efs`, in the given order.
pub fn run_bench(
    index: &Index,
    queries: &QuerySet,
    truth: &[Vec<u32>],
    efs_list: &[usize],
    config: &SweepConfig,
    dataset_name: &str,
) -> Result<BenchReport, BenchError> {
    if efs_list.is_empty() {
        return Err(BenchError::EmptyEfs);
    }
    if let Some(&efs) = efs_list.iter().find(|&&e| e < config.k) {
        return Err(BenchError::KAboveEfs { k: config.k, efs });
    }
    check_inputs(queries, truth)?;
    let mut rows = Vec::with_capacity(efs_list.len());
    for &efs in efs_list {
        let out = index.batch_search(queries, &config.params(efs), config.scoring, config.workers)?;
        rows.push(BenchRow::from_output(efs, &out, truth, config.k, config.workers));
    }
    let mut warnings = Vec::new();
    let mut sorted: Vec<&BenchRow> = rows.iter().collect();
    sorted.sort_by_key(|r| r.efs);
    for w in sorted.windows(2) {
        if w[1].recall < w[0].recall {
            warnings.push(format!(
                "recall fell from {:.4} at efs {} to {:.4} at efs {}",
                w[0].recall, w[0].efs, w[1].recall, w[1].efs
            ));
        }
    }
    for r in &rows {
        if r.latency_qps > 0.0 && config.workers == 1 && (r.qps / r.latency_qps - 1.0).abs() > 0.2 {
            warnings.push(format!(
                "efs {}: wall-clock QPS {:.1} differs from latency-derived QPS {:.1} by more than 20%",
                r.efs, r.qps, r.latency_qps
            ));
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let graph = index.graph();
    let env = BenchEnv {
        dataset: dataset_name.to_string(),
        n: index.len(),
        dim: index.data().dim(),
        metric: index.metric().to_string(),
        degree: graph.degree(),
        queries: queries.len(),
        k: config.k,
        workers: config.workers,
        batch_width: config.batch.effective_width(graph.degree()),
        prefetch: config.prefetch == Prefetch::On,
        early_term: config.early_term.map(|e| (e.threshold, e.patience)),
        scoring: match config.scoring {
            Scoring::Exact => "exact".into(),
            Scoring::Codes { rerank } => format!("codes, rerank {rerank}"),
        },
        reordered: index.permutation().is_some(),
    };
    Ok(BenchReport { env, rows, warnings })
}

/// One rung of the ablation ladder.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub efs: usize,
    /// Whether `efs` reached the recall floor; otherwise it is the largest efs tried.
    pub matched: bool,
    pub batch_width: usize,
    pub prefetch: bool,
    pub early_term: Option<(usize, usize)>,
    pub recall: f64,
    pub qps: f64,
    pub mean_distance_computations: f64,
    pub mean_hops: f64,
    /// QPS relative to the first row.
    pub qps_gain: f64,
    /// Distance computations relative to the first row.
    pub distance_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub recall_floor: f64,
    pub k: usize,
    pub rows: Vec<AblationRow>,
    pub tune: Option<TuneReport>,
}

impl AblationReport {
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<12} {:>5} {:>8} {:>12} {:>10} {:>8} {:>9} {:>9}\n",
            "config", "efs", "recall", "qps", "dist_comp", "hops", "qps_gain", "dc_ratio"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<12} {:>5} {:>8.4} {:>12.1} {:>10.1} {:>8.1} {:>9.3} {:>9.3}{}",
                r.name,
                r.efs,
                r.recall,
                r.qps,
                r.mean_distance_computations,
                r.mean_hops,
                r.qps_gain,
                r.distance_ratio,
                if r.matched { "" } else { "  (floor not reached)" }
            );
        }
        s
    }
}

/// Smallest efs in ascending `efs_list` meeting `floor`, with its output.
fn matched_efs(
    index: &Index,
    queries: &QuerySet,
    truth: &[Vec<u32>],
    efs_list: &[usize],
    config: &SweepConfig,
    floor: f64,
) -> Result<(usize, bool, BatchOutput), BenchError> {
    let mut last = None;
    for &efs in efs_list {
        let out = index.batch_search(queries, &config.params(efs), config.scoring, config.workers)?;
        if mean_recall(&out.id_matrix(), truth, config.k) >= floor {
            return Ok((efs, true, out));
        }
        last = Some((efs, out));
    }
    let (efs, out) = last.ok_or(BenchError::EmptyEfs)?;
    Ok((efs, false, out))
}

/// Runs the five configurations: unrefined graph, refined graph, tuned early
/// termination, batched distances, prefetch hints. Each row reports the
/// smallest efs meeting `recall_floor`.
pub fn ablate(
    unrefined: &Index,
    refined: &Index,
    queries: &QuerySet,
    truth: &[Vec<u32>],
    efs_list: &[usize],
    k: usize,
    recall_floor: f64,
    workers: usize,
) -> Result<AblationReport, BenchError> {
    if efs_list.is_empty() {
        return Err(BenchError::EmptyEfs);
    }
    check_inputs(queries, truth)?;
    let mut efs_sorted: Vec<usize> = efs_list.iter().copied().filter(|&e| e >= k).collect();
    efs_sorted.sort_unstable();
    efs_sorted.dedup();
    if efs_sorted.is_empty() {
        return Err(BenchError::KAboveEfs { k, efs: efs_list[0] });
    }

    let scalar = SweepConfig { workers, ..SweepConfig::new(k) };
    let mut rows = Vec::with_capacity(5);
    let mut push = |name: &str, index: &Index, config: &SweepConfig, efs: usize, matched: bool, out: &BatchOutput| {
        let row = BenchRow::from_output(efs, out, truth, k, workers);
        rows.push(AblationRow {
            name: name.into(),
            efs,
            matched,
            batch_width: config.batch.effective_width(index.graph().degree()),
            prefetch: config.prefetch == Prefetch::On,
            early_term: config.early_term.map(|e| (e.threshold, e.patience)),
            recall: row.recall,
            qps: row.qps,
            mean_distance_computations: row.mean_distance_computations,
            mean_hops: row.mean_hops,
            qps_gain: 1.0,
            distance_ratio: 1.0,
        });
    };

    let (efs, ok, out) = matched_efs(unrefined, queries, truth, &efs_sorted, &scalar, recall_floor)?;
    push("base", unrefined, &scalar, efs, ok, &out);

    let (efs, ok, out) = matched_efs(refined, queries, truth, &efs_sorted, &scalar, recall_floor)?;
    push("+index", refined, &scalar, efs, ok, &out);

    let tune = if efs >= 2 {
        let setup = TuneSetup { workers, ..TuneSetup::new(k, efs, recall_floor) };
        Some(tune_early_term(refined, queries, truth, setup)?)
    } else {
        None
    };
    let early_term = tune.as_ref().and_then(|t| t.tuned()).map(|t| t.rule());
    let with_et = SweepConfig { early_term, ..scalar };
    let run = |config: &SweepConfig| refined.batch_search(queries, &config.params(efs), Scoring::Exact, workers);
    push("+early_term", refined, &with_et, efs, ok, &run(&with_et)?);

    let with_batch = SweepConfig { batch: BatchSpec::for_dim(refined.data().padded_dim()), ..with_et };
    push("+batch", refined, &with_batch, efs, ok, &run(&with_batch)?);

    let with_prefetch = SweepConfig { prefetch: Prefetch::On, ..with_batch };
    push("+prefetch", refined, &with_prefetch, efs, ok, &run(&with_prefetch)?);

    let (base_qps, base_dc) = (rows[0].qps, rows[0].mean_distance_computations);
    for r in &mut rows {
        r.qps_gain = if base_qps > 0.0 { r.qps / base_qps } else { 0.0 };
        r.distance_ratio = if base_dc > 0.0 { r.mean_distance_computations / base_dc } else { 0.0 };
    }
    Ok(AblationReport { recall_floor, k, rows, tune })
}
