//! Acceptance suite: one line per criterion, nonzero exit if any fails.

mod common;

use std::cell::{Cell, OnceCell};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use vexg::bench::{ground_truth, mean_recall};
use vexg::dataset::{Metric, QuerySet, RawVectors, VectorDataset};
use vexg::distance::{compute_batch_size, BatchSpec, Prefetch};
use vexg::graph::{
    build_graph, build_knn_graph, choose_entry, ensure_reachability, initial_graph, refine, BuildParams,
    EdgeSelection, ProximityGraph,
};
use vexg::index::{Index, Scoring};
use vexg::persistence::{decode_index, encode_index, load_index, save_index};
use vexg::quantization::{Codec, PqCodec, QuantizedVectors, SqCodec};
use vexg::reorder::{apply_permutation, bandwidth, mean_edge_span, random_permutation, reorder, Permutation};
use vexg::search::{
    batch_search, early_term_check, search, traverse, ExactScorer, QueryScorer, SearchParams, SearchScratch,
};
use vexg::tune::{tune_early_term, TuneSetup};

type Verdict = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

/// The 10k x 64 workload shared by several criteria, built once.
struct Workload {
    data: VectorDataset,
    queries: QuerySet,
    truth: Vec<Vec<u32>>,
    unrefined: ProximityGraph,
    refined: ProximityGraph,
}

fn build_workload() -> Workload {
    let data = common::dataset(10_000, 64, 1);
    let queries = common::queries(100, &data, 2);
    let truth = ground_truth(&data, &queries, 10);
    let params = BuildParams::default();
    let knn = build_knn_graph(&data, params.knn, params.seed).unwrap();
    let entry = choose_entry(&data);
    let mut unrefined = initial_graph(&data, &knn, &params, entry);
    let mut refined = unrefined.clone();
    refine(&mut refined, &data, &params);
    ensure_reachability(&mut unrefined, &data);
    ensure_reachability(&mut refined, &data);
    unrefined.validate().unwrap();
    refined.validate().unwrap();
    Workload { data, queries, truth, unrefined, refined }
}

struct Fixtures {
    workload: OnceCell<Workload>,
}

impl Fixtures {
    fn workload(&self) -> &Workload {
        self.workload.get_or_init(build_workload)
    }
}

fn criterion_1(_: &Fixtures) -> Verdict {
    let data = common::dataset(1_000, 32, 11);
    let queries = common::queries(100, &data, 12);
    let (graph, _) = build_graph(&data, &BuildParams::default()).map_err(|e| e.to_string())?;
    let params = SearchParams::new(10, data.len());
    let mut exact = 0;
    for (i, q) in queries.iter().enumerate() {
        let got = search(&graph, &data, q, &params).unwrap();
        if got.ids == common::naive_top_k(&data, q, 10) {
            exact += 1;
        } else {
            eprintln!("  query {i}: {:?}", got.ids);
        }
    }
    ensure(exact == 100, format!("{exact}/100 queries exact"))?;
    Ok("100/100 queries return the exact top-10".into())
}

fn criterion_2(fx: &Fixtures) -> Verdict {
    let w = fx.workload();
    let mut curve = Vec::new();
    for efs in [50, 100, 200, 300, 400] {
        let out = batch_search(&w.refined, &w.data, &w.queries, &SearchParams::new(10, efs), 1).unwrap();
        let recall = mean_recall(&out.id_matrix(), &w.truth, 10);
        curve.push(format!("{efs}:{recall:.3}"));
        if recall >= 0.95 {
            return Ok(format!("recall@10 {recall:.3} at efs {efs} (curve {})", curve.join(" ")));
        }
    }
    Err(format!("recall never reached 0.95 (curve {})", curve.join(" ")))
}

fn criterion_3(fx: &Fixtures) -> Verdict {
    let w = fx.workload();
    let eq1 = BatchSpec::for_dim(w.data.padded_dim());
    let width = eq1.effective_width(w.refined.degree());
    ensure(width > 1, "cache-derived width collapsed to 1")?;
    for efs in [40, 120] {
        let scalar = SearchParams::new(10, efs);
        let batched = scalar.with_batch(eq1);
        for (i, q) in w.queries.iter().enumerate() {
            let a = search(&w.refined, &w.data, q, &scalar).unwrap();
            let b = search(&w.refined, &w.data, q, &batched).unwrap();
            ensure(a.ids == b.ids && a.distances == b.distances, format!("query {i}: results differ at efs {efs}"))?;
            ensure(
                a.stats.distance_computations == b.stats.distance_computations,
                format!("query {i}: distance computations differ at efs {efs}"),
            )?;
        }
    }
    Ok(format!("B = {width} identical to B = 1 on 100 queries, two queue sizes"))
}

fn criterion_4(_: &Fixtures) -> Verdict {
    let b = compute_batch_size(65536, 128, 4, 0.5);
    ensure(b == 64, format!("compute_batch_size(65536, 128, 4, 0.5) = {b}"))?;
    let mut runner = TestRunner::new(Config { cases: 512, failure_persistence: None, ..Config::default() });
    let strategy = (1usize..1 << 20, 1usize..4096, 1usize..16, 0.01f64..4.0, 1usize..1 << 12, 0.0f64..2.0);
    runner
        .run(&strategy, |(l1d, dim, elem, alpha, grow, dalpha)| {
            let base = compute_batch_size(l1d, dim, elem, alpha);
            prop_assert!(base >= 1);
            prop_assert!(compute_batch_size(l1d + grow, dim, elem, alpha) >= base);
            prop_assert!(compute_batch_size(l1d, dim + grow, elem, alpha) <= base);
            prop_assert!(compute_batch_size(l1d, dim, elem + grow, alpha) <= base);
            prop_assert!(compute_batch_size(l1d, dim, elem, alpha + dalpha) >= base);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok("B = 64; 512 monotonicity cases hold".into())
}

fn criterion_5(fx: &Fixtures) -> Verdict {
    let table = [(vec![7, 8, 9], 6, 3, true), (vec![7, 2, 9], 6, 3, false), (vec![7], 6, 1, true), (vec![6], 6, 1, false)];
    for (positions, t, tau, want) in table {
        ensure(early_term_check(&positions, t, tau) == want, format!("truth table row {positions:?} t={t} tau={tau}"))?;
    }
    let w = fx.workload();
    let index = Index::new(w.refined.clone(), w.data.clone()).unwrap();
    let ef = 300;
    let report = tune_early_term(&index, &w.queries, &w.truth, TuneSetup::new(10, ef, 0.95)).map_err(|e| e.to_string())?;
    let chosen = report.chosen.ok_or("tuner found no rule meeting recall 0.95")?;
    ensure(chosen.recall >= 0.95, format!("tuned recall {:.3}", chosen.recall))?;
    let saving = report.savings();
    ensure(saving >= 0.10, format!("saving {:.1}% below 10%", 100.0 * saving))?;

    // informational: the same rule on queries the tuner never saw
    let held_out = common::queries(100, &w.data, 3);
    let truth = ground_truth(&w.data, &held_out, 10);
    let rule = SearchParams::new(10, ef).with_early_term(report.tuned().map(|t| t.rule()));
    let on = batch_search(&w.refined, &w.data, &held_out, &rule, 1).unwrap();
    let off = batch_search(&w.refined, &w.data, &held_out, &SearchParams::new(10, ef), 1).unwrap();
    Ok(format!(
        "L={ef} t={} tau={} recall {:.3} vs {:.3}, distance computations {:.0} vs {:.0} (-{:.1}%); held-out recall {:.3}, -{:.1}%",
        chosen.threshold,
        chosen.patience,
        chosen.recall,
        report.baseline_recall,
        chosen.mean_distance_computations,
        report.baseline_distance_computations,
        100.0 * saving,
        mean_recall(&on.id_matrix(), &truth, 10),
        100.0 * (1.0 - on.mean_distance_computations() / off.mean_distance_computations()),
    ))
}

fn six_node_example() -> Result<(), String> {
    // r=0 (0,0), a=1 (2,0), b=2 (0,-3), x=3 (3,0), y=4 (6,0), z=5 (0,-5)
    let rows = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, -3.0], vec![3.0, 0.0], vec![6.0, 0.0], vec![0.0, -5.0]];
    let data = VectorDataset::build(&RawVectors::from_rows(&rows).unwrap(), Metric::SquaredL2).unwrap();
    let lists = vec![vec![1, 2], vec![0, 3], vec![0, 5], vec![1, 4], vec![3], vec![2]];
    let graph = ProximityGraph::from_lists(&lists, 2, 0, Metric::SquaredL2).unwrap();
    let perm = reorder(&graph, &data).map_err(|e| e.to_string())?;
    ensure(perm.inverse() == [0, 1, 3, 2, 5, 4], format!("order {:?}", perm.inverse()))?;
    ensure(bandwidth(&graph, &perm) == 3, format!("bandwidth {}", bandwidth(&graph, &perm)))
}

fn criterion_6(fx: &Fixtures) -> Verdict {
    six_node_example()?;
    let params = BuildParams { max_degree: 8, knn: 8, build_ef: 16, refine_iters: 0, ..BuildParams::default() };
    let (mut wins, mut span_wins) = (0, 0);
    for trial in 0..100u64 {
        let data = common::dataset(500, 4, 1000 + trial);
        let (graph, _) = build_graph(&data, &params).map_err(|e| e.to_string())?;
        let mst = reorder(&graph, &data).map_err(|e| e.to_string())?;
        let random = random_permutation(500, trial);
        if bandwidth(&graph, &mst) <= bandwidth(&graph, &random) {
            wins += 1;
        }
        if mean_edge_span(&graph, &mst) < mean_edge_span(&graph, &random) {
            span_wins += 1;
        }
    }

    let w = fx.workload();
    let perm = reorder(&w.refined, &w.data).map_err(|e| e.to_string())?;
    let (g2, d2) = apply_permutation(&w.refined, &w.data, &perm).map_err(|e| e.to_string())?;
    let params = SearchParams::new(10, 100);
    for (i, q) in w.queries.iter().enumerate() {
        let a = search(&w.refined, &w.data, q, &params).unwrap();
        let b = search(&g2, &d2, q, &params).unwrap();
        let mapped: Vec<u32> = b.ids.iter().map(|&p| perm.inverse()[p as usize]).collect();
        ensure(mapped == a.ids && b.distances == a.distances, format!("query {i} differs after renumbering"))?;
    }
    ensure(
        wins >= 95,
        format!(
            "MST bandwidth <= random in only {wins}/100 trials (mean edge span lower in {span_wins}/100); 6-node example and 100-query invariance pass"
        ),
    )?;
    let before = bandwidth(&w.refined, &Permutation::identity(w.data.len()));
    Ok(format!(
        "6-node order and bandwidth match; MST <= random in {wins}/100, mean span lower in {span_wins}/100; 100 queries invariant (10k bandwidth {before} -> {})",
        bandwidth(&w.refined, &perm)
    ))
}

/// Counts productive expansions until the target id is first scored.
struct Watch<'a> {
    inner: ExactScorer<'a>,
    target: u32,
    calls: Cell<usize>,
    found_after: Cell<Option<usize>>,
}

impl QueryScorer for Watch<'_> {
    fn score(&self, ids: &[u32], out: &mut [f32]) {
        if self.found_after.get().is_none() && ids.contains(&self.target) {
            self.found_after.set(Some(self.calls.get()));
        }
        self.calls.set(self.calls.get() + 1);
        self.inner.score(ids, out);
    }
}

fn hops_to_top1(graph: &ProximityGraph, w: &Workload) -> (f64, usize) {
    // one scoring call per expansion with at least one new neighbor
    let params = SearchParams::new(10, 100).with_batch(BatchSpec::fixed(graph.degree()));
    let mut scratch = SearchScratch::default();
    let (mut total, mut missed) = (0usize, 0usize);
    for (i, q) in w.queries.iter().enumerate() {
        let watch = Watch {
            inner: ExactScorer { query: q, data: &w.data },
            target: w.truth[i][0],
            calls: Cell::new(0),
            found_after: Cell::new(None),
        };
        traverse(graph, &watch, &params, &mut scratch);
        match watch.found_after.get() {
            Some(h) => total += h,
            None => {
                missed += 1;
                total += watch.calls.get();
            }
        }
    }
    (total as f64 / w.queries.len() as f64, missed)
}

fn criterion_7(fx: &Fixtures) -> Verdict {
    let rows: Vec<Vec<f32>> = [0.0f32, 3.0, 1.0, 10.0].iter().map(|&x| vec![x]).collect();
    let data = VectorDataset::build(&RawVectors::from_rows(&rows).unwrap(), Metric::SquaredL2).unwrap();
    let mut g = ProximityGraph::from_lists(&[vec![1], vec![2], vec![3], vec![0]], 2, 0, Metric::SquaredL2).unwrap();
    let params = BuildParams {
        max_degree: 2,
        knn: 2,
        build_ef: 1,
        refine_iters: 1,
        selection: EdgeSelection::DistancePrune { alpha: 1.0 },
        ..BuildParams::default()
    };
    refine(&mut g, &data, &params);
    ensure(g.neighbors(0).contains(&2), format!("node 0 neighbors after one pass: {:?}", g.neighbors(0)))?;

    let w = fx.workload();
    let (before, missed_before) = hops_to_top1(&w.unrefined, w);
    let (after, missed_after) = hops_to_top1(&w.refined, w);
    ensure(after <= before, format!("mean hops to top-1 rose from {before:.2} to {after:.2}"))?;
    Ok(format!(
        "4-point edge added; mean hops to top-1 {before:.2} -> {after:.2} (misses {missed_before} -> {missed_after})"
    ))
}

fn criterion_8(_: &Fixtures) -> Verdict {
    let data = common::dataset(2_000, 48, 21);
    let sq = SqCodec::train(&data);
    let mut worst = 0.0f32;
    for i in 0..data.len() {
        let x = data.vector(i);
        let y = sq.decode(&sq.encode(x));
        for j in 0..x.len() {
            let bound = (sq.hi()[j] - sq.lo()[j]) / 255.0 / 2.0 + 1e-6;
            let err = (x[j] - y[j]).abs();
            ensure(err <= bound, format!("SQ error {err} above bound {bound} at ({i}, {j})"))?;
            worst = worst.max(err);
        }
    }

    let pq = PqCodec::train(&data, 12, 25, 5).map_err(|e| e.to_string())?;
    let history = pq.objective_history();
    ensure(history.windows(2).all(|w| w[1] <= w[0]), format!("k-means objective rose: {history:?}"))?;

    let small = common::dataset(256, 16, 22);
    let zero = PqCodec::train(&small, 1, 10, 3).map_err(|e| e.to_string())?;
    ensure(zero.objective_history().last() == Some(&0.0), "256-point codec is not exact")?;
    let (graph, _) = build_graph(&small, &common::small_params(12)).map_err(|e| e.to_string())?;
    let index = Index::new(graph.clone(), small.clone()).unwrap();
    let mut indexed = index.clone();
    indexed.set_codes(Some(QuantizedVectors::encode(Codec::Pq(zero), &small))).unwrap();
    let queries = common::queries(100, &small, 23);
    let params = SearchParams::new(10, 40);
    let mut scratch = SearchScratch::default();
    for (i, q) in queries.iter().enumerate() {
        let exact = index.search(q, &params, Scoring::Exact, &mut scratch).unwrap();
        let adc = indexed.search(q, &params, Scoring::Codes { rerank: params.ef }, &mut scratch).unwrap();
        ensure(exact.ids == adc.ids && exact.distances == adc.distances, format!("query {i} differs under ADC"))?;
    }
    Ok(format!(
        "SQ worst error {worst:.2e} within bound; PQ objective {:.4} -> {:.4} over {} iterations; zero-error ADC equals exact on 100 queries",
        history[0],
        history[history.len() - 1],
        history.len()
    ))
}

fn criterion_9(_: &Fixtures) -> Verdict {
    let data = common::dataset(600, 12, 31);
    let (mut index, _) =
        Index::build(data.clone(), &common::small_params(10), vexg::index::ReorderKind::Mst, Some("sq8".parse().unwrap()))
            .map_err(|e| e.to_string())?;
    index.set_early_term(Some(vexg::index::TunedEarlyTerm { ef: 40, threshold: 20, patience: 30 })).unwrap();
    let bytes = encode_index(&index);

    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    for trial in 0..1000 {
        let mut image = bytes.clone();
        if trial % 2 == 0 {
            image.truncate(rng.gen_range(0..bytes.len()));
        } else {
            let at = rng.gen_range(0..bytes.len());
            image[at] ^= rng.gen_range(1..=255u8);
        }
        let outcome = catch_unwind(AssertUnwindSafe(|| decode_index(&image)));
        match outcome {
            Err(_) => return Err(format!("trial {trial}: decoder panicked")),
            Ok(Ok(_)) => return Err(format!("trial {trial}: damaged image was accepted")),
            Ok(Err(e)) => ensure(e.section().is_some(), format!("trial {trial}: error without a section: {e}"))?,
        }
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("index.vexg");
    save_index(&index, &path).map_err(|e| e.to_string())?;
    let loaded = load_index(&path).map_err(|e| e.to_string())?;
    ensure(loaded == index, "reloaded index differs")?;
    let queries = common::queries(100, &data, 32);
    let params = SearchParams::new(10, 40);
    let a = index.batch_search(&queries, &params, Scoring::Exact, 1).unwrap();
    let b = loaded.batch_search(&queries, &params, Scoring::Exact, 1).unwrap();
    ensure(a.id_matrix() == b.id_matrix(), "search results differ after reload")?;
    Ok("1000 damaged images rejected with section-named errors; reload is search-identical".into())
}

fn criterion_10(fx: &Fixtures) -> Verdict {
    let w = fx.workload();
    let queries = common::queries(2_000, &w.data, 41);
    let params = SearchParams::new(10, 64).with_batch(BatchSpec::for_dim(w.data.padded_dim())).with_prefetch(Prefetch::On);
    let one = batch_search(&w.refined, &w.data, &queries, &params, 1).unwrap();
    let eight = batch_search(&w.refined, &w.data, &queries, &params, 8).unwrap();
    ensure(one.id_matrix() == eight.id_matrix(), "result matrices differ between 1 and 8 workers")?;
    let dists_equal = one.results.iter().zip(&eight.results).all(|(a, b)| a.distances == b.distances);
    ensure(dists_equal, "distances differ between 1 and 8 workers")?;
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let scaling = eight.qps() / one.qps();
    let note = if cores >= 8 && scaling < 4.0 {
        format!("warning: scaling {scaling:.2}x below 4x on {cores} cores")
    } else if cores < 8 {
        format!("scaling {scaling:.2}x on {cores} core(s), 4x check needs 8 cores")
    } else {
        format!("scaling {scaling:.2}x")
    };
    Ok(format!("2000 queries identical across 1 and 8 workers; {note}"))
}

fn main() {
    let criteria: [(&str, u64, fn(&Fixtures) -> Verdict); 10] = [
        ("oracle equivalence at L = n", 10, criterion_1),
        ("recall operating point", 120, criterion_2),
        ("batching neutrality", 30, criterion_3),
        ("batch size arithmetic", 1, criterion_4),
        ("early termination", 180, criterion_5),
        ("reordering", 60, criterion_6),
        ("refinement", 120, criterion_7),
        ("quantization", 60, criterion_8),
        ("persistence", 60, criterion_9),
        ("concurrency determinism", 60, criterion_10),
    ];
    let fixtures = Fixtures { workload: OnceCell::new() };
    let mut failed = 0;
    println!("running {} acceptance criteria", criteria.len());
    for (i, (name, limit, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(|| check(&fixtures)))
            .unwrap_or_else(|p| Err(format!("panicked: {}", p.downcast_ref::<String>().cloned().unwrap_or_default())));
        let elapsed = started.elapsed();
        let in_time = elapsed <= Duration::from_secs(*limit);
        let (status, detail) = match (&verdict, in_time) {
            (Ok(d), true) => ("PASS", d.clone()),
            (Ok(d), false) => ("FAIL", format!("over the {limit} s budget; {d}")),
            (Err(e), _) => ("FAIL", e.clone()),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!("criterion {:>2} {:<30} {status} {:>6.2}s  {detail}", i + 1, name, elapsed.as_secs_f64());
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
