#![allow(dead_code)]

use vexg::dataset::{Metric, QuerySet, RawVectors, VectorDataset};
use vexg::graph::{random_points, BuildParams};

pub fn dataset(n: usize, dim: usize, seed: u64) -> VectorDataset {
    dataset_with(n, dim, seed, Metric::SquaredL2)
}

pub fn dataset_with(n: usize, dim: usize, seed: u64, metric: Metric) -> VectorDataset {
    VectorDataset::build(&RawVectors::from_rows(&random_points(n, dim, seed)).unwrap(), metric).unwrap()
}

pub fn queries(n: usize, base: &VectorDataset, seed: u64) -> QuerySet {
    QuerySet::build(&RawVectors::from_rows(&random_points(n, base.dim(), seed)).unwrap(), base).unwrap()
}

pub fn small_params(degree: usize) -> BuildParams {
    BuildParams { max_degree: degree, knn: degree, build_ef: 2 * degree, ..BuildParams::default() }
}

/// Top-k by direct f64 scan and full sort, independent of the library's own
/// ground truth routine.
pub fn naive_top_k(data: &VectorDataset, q: &[f32], k: usize) -> Vec<u32> {
    let mut all: Vec<(f64, u32)> = (0..data.len())
        .map(|i| {
            let x = data.vector(i);
            let d = match data.metric() {
                Metric::NegativeInnerProduct => -(0..q.len()).map(|j| q[j] as f64 * x[j] as f64).sum::<f64>(),
                _ => (0..q.len()).map(|j| (q[j] as f64 - x[j] as f64).powi(2)).sum::<f64>(),
            };
            (d, i as u32)
        })
        .collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    all.into_iter().take(k).map(|p| p.1).collect()
}
