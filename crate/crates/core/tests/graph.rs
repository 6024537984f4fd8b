mod common;

use std::collections::HashSet;

use vexg::dataset::Metric;
use vexg::graph::{build_graph, build_knn_graph, choose_entry, BuildParams, EdgeSelection, SENTINEL};

#[test]
fn built_graph_invariants() {
    let data = common::dataset(1000, 16, 5);
    let params = common::small_params(16);
    let (graph, report) = build_graph(&data, &params).unwrap();
    assert_eq!(graph.len(), 1000);
    assert_eq!(graph.degree(), 16);
    graph.validate().unwrap();
    assert_eq!(graph.reachable_count(), 1000);
    assert_eq!(report.entry, graph.entry());
    for v in 0..1000u32 {
        let row = graph.row(v);
        let live = graph.neighbors(v);
        assert!(live.len() <= 16);
        assert!(row[live.len()..].iter().all(|&x| x == SENTINEL), "padding must trail live ids");
        assert!(!live.contains(&v), "self loop at {v}");
        let set: HashSet<u32> = live.iter().copied().collect();
        assert_eq!(set.len(), live.len(), "duplicate neighbor at {v}");
        assert!(live.iter().all(|&u| (u as usize) < 1000));
    }
}

#[test]
fn knn_graph_is_accurate() {
    let data = common::dataset(2000, 8, 6);
    let knn = build_knn_graph(&data, 10, 7).unwrap();
    let mut hits = 0;
    for v in 0..2000u32 {
        let exact: HashSet<u32> =
            common::naive_top_k(&data, data.vector(v as usize), 11).into_iter().filter(|&u| u != v).take(10).collect();
        hits += knn.ids(v).iter().filter(|u| exact.contains(u)).count();
        assert!(knn.distances(v).windows(2).all(|w| w[0] <= w[1]));
    }
    let recall = hits as f64 / (2000.0 * 10.0);
    assert!(recall >= 0.9, "kNN recall {recall}");
}

#[test]
fn build_is_deterministic() {
    let data = common::dataset(800, 12, 8);
    let params = common::small_params(12);
    let (a, _) = build_graph(&data, &params).unwrap();
    let (b, _) = build_graph(&data, &params).unwrap();
    assert_eq!(a.adjacency(), b.adjacency());
    assert_eq!(a.entry(), b.entry());
}

#[test]
fn entry_is_nearest_to_centroid() {
    let data = common::dataset(500, 6, 9);
    let mut centroid = vec![0f64; data.padded_dim()];
    for i in 0..data.len() {
        for (c, &x) in centroid.iter_mut().zip(data.vector(i)) {
            *c += x as f64 / data.len() as f64;
        }
    }
    let d = |i: usize| data.vector(i).iter().zip(&centroid).map(|(&x, c)| (x as f64 - c).powi(2)).sum::<f64>();
    let best = (0..data.len()).min_by(|&a, &b| d(a).total_cmp(&d(b))).unwrap();
    assert_eq!(choose_entry(&data), best as u32);
}

#[test]
fn other_metrics_and_selections_build() {
    for metric in [Metric::NegativeInnerProduct, Metric::Angular] {
        let data = common::dataset_with(400, 8, 10, metric);
        let (graph, _) = build_graph(&data, &common::small_params(8)).unwrap();
        assert_eq!(graph.reachable_count(), 400);
    }
    let data = common::dataset(400, 8, 11);
    let params =
        BuildParams { selection: EdgeSelection::AnglePrune { min_angle_degrees: 60.0 }, ..common::small_params(8) };
    let (graph, _) = build_graph(&data, &params).unwrap();
    assert_eq!(graph.reachable_count(), 400);
}

#[test]
fn bad_parameters_are_rejected() {
    let data = common::dataset(50, 4, 12);
    let base = common::small_params(8);
    assert!(build_graph(&data, &BuildParams { max_degree: 0, ..base.clone() }).is_err());
    assert!(build_graph(&data, &BuildParams { knn: 4, ..base.clone() }).is_err());
    let alpha = BuildParams { selection: EdgeSelection::DistancePrune { alpha: 0.5 }, ..base };
    assert!(build_graph(&data, &alpha).is_err());
}
