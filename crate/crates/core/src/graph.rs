//! Proximity graph storage and construction.
//!
//! Construction runs in four stages:
//! 1. an approximate kNN graph is bootstrapped by neighbor-of-neighbor descent,
//! 2. each node's kNN list plus a graph search for the node itself is pruned
//!    by the configured edge selection rule, with reverse edges merged in,
//! 3. the graph is refined for `F` passes: each node's pool is re-expanded
//!    with its 2-hop neighborhood and a fresh self-search, then re-pruned,
//! 4. any node not reachable from the entry is linked in.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Metric, VectorDataset};
use crate::distance::{distance, BatchSpec};
use crate::search::{traverse, ExactScorer, SearchParams, SearchScratch};

/// Padding value for unused adjacency slots.
pub const SENTINEL: u32 = u32::MAX;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("invalid build parameters: {0}")]
    InvalidParams(String),
    #[error("need more than K = {k} points to build a kNN graph, got {n}")]
    TooFewPoints { n: usize, k: usize },
    #[error("node {node} has a self-loop")]
    SelfLoop { node: u32 },
    #[error("node {node} lists neighbor {neighbor} twice")]
    DuplicateNeighbor { node: u32, neighbor: u32 },
    #[error("node {node} has out-of-range neighbor {neighbor}")]
    NeighborOutOfRange { node: u32, neighbor: u32 },
    #[error("node {node} has a real neighbor after a sentinel slot")]
    BadPadding { node: u32 },
    #[error("entry node {entry} out of range")]
    BadEntry { entry: u32 },
    #[error("{unreachable} of {n} nodes are unreachable from the entry")]
    Unreachable { unreachable: usize, n: usize },
    #[error("adjacency has {found} slots, expected {expected}")]
    AdjacencyLength { expected: usize, found: usize },
}

/// A neighbor candidate with its distance to some anchor node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: u32,
    pub distance: f32,
}

impl Neighbor {
    pub fn new(id: u32, distance: f32) -> Self {
        Self { id, distance }
    }
}

fn by_distance_then_id(a: &Neighbor, b: &Neighbor) -> std::cmp::Ordering {
    a.distance.total_cmp(&b.distance).then(a.id.cmp(&b.id))
}

/// Fixed-out-degree adjacency: `n * degree` ids, real neighbors first, then [`SENTINEL`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProximityGraph {
    n: usize,
    degree: usize,
    adjacency: Vec<u32>,
    entry: u32,
    metric: Metric,
}

impl ProximityGraph {
    pub fn empty(n: usize, degree: usize, entry: u32, metric: Metric) -> Self {
        Self {
            n,
            degree,
            adjacency: vec![SENTINEL; n * degree],
            entry,
            metric,
        }
    }

    /// Wraps a raw adjacency buffer, validating its shape and row contents.
    pub fn from_adjacency(
        n: usize,
        degree: usize,
        adjacency: Vec<u32>,
        entry: u32,
        metric: Metric,
    ) -> Result<Self, GraphError> {
        if adjacency.len() != n * degree {
            return Err(GraphError::AdjacencyLength { expected: n * degree, found: adjacency.len() });
        }
        let g = Self { n, degree, adjacency, entry, metric };
        g.check_rows()?;
        Ok(g)
    }

    /// Builds a graph from explicit neighbor lists (truncated to `degree`).
    pub fn from_lists(lists: &[Vec<u32>], degree: usize, entry: u32, metric: Metric) -> Result<Self, GraphError> {
        let mut g = Self::empty(lists.len(), degree, entry, metric);
        for (v, list) in lists.iter().enumerate() {
            g.set_row(v as u32, &list[..list.len().min(degree)]);
        }
        g.check_rows()?;
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn entry(&self) -> u32 {
        self.entry
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn adjacency(&self) -> &[u32] {
        &self.adjacency
    }

    /// The full padded row of `v`.
    pub fn row(&self, v: u32) -> &[u32] {
        let s = v as usize * self.degree;
        &self.adjacency[s..s + self.degree]
    }

    /// Real neighbors of `v`.
    #[inline]
    pub fn neighbors(&self, v: u32) -> &[u32] {
        let row = self.row(v);
        let len = row.iter().position(|&x| x == SENTINEL).unwrap_or(row.len());
        &row[..len]
    }

    pub fn set_row(&mut self, v: u32, neighbors: &[u32]) {
        assert!(neighbors.len() <= self.degree, "row longer than out-degree");
        let s = v as usize * self.degree;
        let row = &mut self.adjacency[s..s + self.degree];
        row[..neighbors.len()].copy_from_slice(neighbors);
        row[neighbors.len()..].fill(SENTINEL);
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().filter(|&&x| x != SENTINEL).count()
    }

    /// Iterator over directed edges `(u, v)`.
    pub fn edges(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        (0..self.n as u32).flat_map(move |u| self.neighbors(u).iter().map(move |&v| (u, v)))
    }

    /// Number of nodes reachable from the entry along directed edges.
    pub fn reachable_count(&self) -> usize {
        self.reachable_from(self.entry).iter().filter(|&&r| r).count()
    }

    fn reachable_from(&self, start: u32) -> Vec<bool> {
        let mut seen = vec![false; self.n];
        if (start as usize) >= self.n {
            return seen;
        }
        let mut queue = VecDeque::from([start]);
        seen[start as usize] = true;
        while let Some(u) = queue.pop_front() {
            for &v in self.neighbors(u) {
                if !seen[v as usize] {
                    seen[v as usize] = true;
                    queue.push_back(v);
                }
            }
        }
        seen
    }

    fn check_rows(&self) -> Result<(), GraphError> {
        if self.n > 0 && self.entry as usize >= self.n {
            return Err(GraphError::BadEntry { entry: self.entry });
        }
        for v in 0..self.n as u32 {
            let row = self.row(v);
            let real = self.neighbors(v);
            if row[real.len()..].iter().any(|&x| x != SENTINEL) {
                return Err(GraphError::BadPadding { node: v });
            }
            for (i, &u) in real.iter().enumerate() {
                if u == v {
                    return Err(GraphError::SelfLoop { node: v });
                }
                if u as usize >= self.n {
                    return Err(GraphError::NeighborOutOfRange { node: v, neighbor: u });
                }
                if real[..i].contains(&u) {
                    return Err(GraphError::DuplicateNeighbor { node: v, neighbor: u });
                }
            }
        }
        Ok(())
    }

    /// Full invariant suite: row shape, id validity, and reachability from the entry.
    pub fn validate(&self) -> Result<(), GraphError> {
        self.check_rows()?;
        let reachable = self.reachable_count();
        if reachable != self.n {
            return Err(GraphError::Unreachable { unreachable: self.n - reachable, n: self.n });
        }
        Ok(())
    }
}

/// Edge selection rule used to prune a candidate pool down to `M` neighbors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EdgeSelection {
    /// Drop candidate `c` when some kept `u` has `alpha * d(u, c) < d(node, c)`,
    /// with `d` the (unsquared) Euclidean distance. `alpha = 1` is the RNG rule.
    DistancePrune { alpha: f32 },
    /// Keep `c` only if the angle at the node between `c` and every kept
    /// neighbor is at least `min_angle_degrees`.
    AnglePrune { min_angle_degrees: f32 },
}

impl Default for EdgeSelection {
    fn default() -> Self {
        EdgeSelection::DistancePrune { alpha: 1.2 }
    }
}

pub const DEFAULT_ANGLE_DEGREES: f32 = 60.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildParams {
    /// Out-degree `M`.
    pub max_degree: usize,
    /// Bootstrap kNN width `K`.
    pub knn: usize,
    /// Queue size of the self-searches used during construction.
    pub build_ef: usize,
    /// Refinement passes `F`.
    pub refine_iters: usize,
    pub selection: EdgeSelection,
    pub seed: u64,
    /// Optional wall-clock cap on the refinement stage.
    pub refine_budget: Option<Duration>,
}

impl Default for BuildParams {
    fn default() -> Self {
        Self {
            max_degree: 32,
            knn: 32,
            build_ef: 100,
            refine_iters: 2,
            selection: EdgeSelection::default(),
            seed: 42,
            refine_budget: None,
        }
    }
}

impl BuildParams {
    pub fn validate(&self) -> Result<(), GraphError> {
        let bad = |m: String| Err(GraphError::InvalidParams(m));
        if self.max_degree == 0 {
            return bad("out-degree M must be positive".into());
        }
        if self.knn < self.max_degree {
            return bad(format!("kNN width K = {} must be >= M = {}", self.knn, self.max_degree));
        }
        if self.build_ef == 0 {
            return bad("build queue size must be positive".into());
        }
        match self.selection {
            EdgeSelection::DistancePrune { alpha } if !(alpha >= 1.0) => bad(format!("alpha = {alpha} must be >= 1")),
            EdgeSelection::AnglePrune { min_angle_degrees } if !(0.0..=180.0).contains(&min_angle_degrees) => {
                bad(format!("angle threshold {min_angle_degrees} outside [0, 180]"))
            }
            _ => Ok(()),
        }
    }

    /// Pool size handed to edge selection.
    fn pool_cap(&self) -> usize {
        (2 * self.build_ef).max(4 * self.max_degree)
    }
}

/// Sorted `K`-nearest lists for every node.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    k: usize,
    ids: Vec<u32>,
    dists: Vec<f32>,
}

impl KnnGraph {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.ids.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self, v: u32) -> &[u32] {
        &self.ids[v as usize * self.k..(v as usize + 1) * self.k]
    }

    pub fn distances(&self, v: u32) -> &[f32] {
        &self.dists[v as usize * self.k..(v as usize + 1) * self.k]
    }

    pub fn neighbors(&self, v: u32) -> impl Iterator<Item = Neighbor> + '_ {
        self.ids(v).iter().zip(self.distances(v)).map(|(&id, &d)| Neighbor::new(id, d))
    }

    fn as_graph(&self, entry: u32, metric: Metric) -> ProximityGraph {
        ProximityGraph {
            n: self.len(),
            degree: self.k,
            adjacency: self.ids.clone(),
            entry,
            metric,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct KnnEntry {
    dist: f32,
    id: u32,
    fresh: bool,
}

/// Inserts into a full, sorted row; equal distances keep the incumbent.
fn knn_try_insert(row: &mut [KnnEntry], id: u32, dist: f32) -> bool {
    let k = row.len();
    if !(dist < row[k - 1].dist) || row.iter().any(|e| e.id == id) {
        return false;
    }
    let pos = row.partition_point(|e| e.dist <= dist);
    row.copy_within(pos..k - 1, pos + 1);
    row[pos] = KnnEntry { dist, id, fresh: true };
    true
}

const DESCENT_SAMPLE_RATE: f64 = 1.0;
const DESCENT_DELTA: f64 = 0.001;
const DESCENT_MAX_ROUNDS: usize = 30;
const DESCENT_CHUNK: usize = 256;

/// Approximate kNN graph by neighbor-of-neighbor descent.
///
/// Stops when fewer than `0.001 * n * K` list updates happen in a round, or after 30 rounds.
pub fn build_knn_graph(data: &VectorDataset, k: usize, seed: u64) -> Result<KnnGraph, GraphError> {
    let n = data.len();
    if k == 0 {
        return Err(GraphError::InvalidParams("K must be positive".into()));
    }
    if n <= k {
        return Err(GraphError::TooFewPoints { n, k });
    }
    let metric = data.metric();
    let dist = |a: u32, b: u32| distance(data.vector(a as usize), data.vector(b as usize), metric);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut lists: Vec<KnnEntry> = Vec::with_capacity(n * k);
    for v in 0..n {
        let mut row: Vec<KnnEntry> = sample(&mut rng, n - 1, k)
            .into_iter()
            .map(|i| {
                let id = if i >= v { i + 1 } else { i } as u32;
                KnnEntry { dist: dist(v as u32, id), id, fresh: true }
            })
            .collect();
        row.sort_by(|a, b| a.dist.total_cmp(&b.dist).then(a.id.cmp(&b.id)));
        lists.extend(row);
    }

    let max_sample = ((DESCENT_SAMPLE_RATE * k as f64).ceil() as usize).max(1);
    let mut new_c: Vec<Vec<u32>> = vec![Vec::new(); n];
    let mut old_c: Vec<Vec<u32>> = vec![Vec::new(); n];
    for round in 0..DESCENT_MAX_ROUNDS {
        for v in 0..n {
            new_c[v].clear();
            old_c[v].clear();
            let row = &mut lists[v * k..(v + 1) * k];
            old_c[v].extend(row.iter().filter(|e| !e.fresh).map(|e| e.id));
            let fresh: Vec<usize> = (0..k).filter(|&i| row[i].fresh).collect();
            let picked: Vec<usize> = if fresh.len() > max_sample {
                sample(&mut rng, fresh.len(), max_sample).into_iter().map(|j| fresh[j]).collect()
            } else {
                fresh
            };
            for i in picked {
                new_c[v].push(row[i].id);
                row[i].fresh = false;
            }
        }

        let mut rev_new: Vec<Vec<u32>> = vec![Vec::new(); n];
        let mut rev_old: Vec<Vec<u32>> = vec![Vec::new(); n];
        for v in 0..n {
            for &u in &new_c[v] {
                rev_new[u as usize].push(v as u32);
            }
            for &u in &old_c[v] {
                rev_old[u as usize].push(v as u32);
            }
        }
        for v in 0..n {
            for (fwd, rev) in [(&mut new_c[v], &mut rev_new[v]), (&mut old_c[v], &mut rev_old[v])] {
                if rev.len() > max_sample {
                    let picked: Vec<u32> = sample(&mut rng, rev.len(), max_sample).into_iter().map(|j| rev[j]).collect();
                    *rev = picked;
                }
                for &u in rev.iter() {
                    if !fwd.contains(&u) {
                        fwd.push(u);
                    }
                }
            }
        }

        let mut updates = 0usize;
        for start in (0..n).step_by(DESCENT_CHUNK) {
            let end = (start + DESCENT_CHUNK).min(n);
            let pairs: Vec<Vec<(u32, u32, f32)>> = (start..end)
                .into_par_iter()
                .map(|v| {
                    let new = &new_c[v];
                    let old = &old_c[v];
                    let mut out = Vec::with_capacity(new.len() * (new.len() + old.len()));
                    for (i, &a) in new.iter().enumerate() {
                        for &b in &new[i + 1..] {
                            if a != b {
                                out.push((a, b, dist(a, b)));
                            }
                        }
                        for &b in old {
                            if a != b {
                                out.push((a, b, dist(a, b)));
                            }
                        }
                    }
                    out
                })
                .collect();
            for (a, b, d) in pairs.into_iter().flatten() {
                let (a, b) = (a as usize, b as usize);
                updates += usize::from(knn_try_insert(&mut lists[a * k..(a + 1) * k], b as u32, d));
                updates += usize::from(knn_try_insert(&mut lists[b * k..(b + 1) * k], a as u32, d));
            }
        }
        log::debug!("knn descent round {round}: {updates} updates");
        if (updates as f64) < DESCENT_DELTA * (n * k) as f64 {
            break;
        }
    }

    Ok(KnnGraph {
        k,
        ids: lists.iter().map(|e| e.id).collect(),
        dists: lists.iter().map(|e| e.dist).collect(),
    })
}

fn diff_dot(a: &[f32], b: &[f32], origin: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .zip(origin)
        .map(|((&x, &y), &o)| f64::from(x - o) * f64::from(y - o))
        .sum()
}

/// Prunes `candidates` (sorted ascending by distance to `node`) to at most `max_degree` ids.
///
/// Kept ids preserve the input order.
pub fn select_edges(
    data: &VectorDataset,
    node: u32,
    candidates: &[Neighbor],
    selection: EdgeSelection,
    max_degree: usize,
) -> Vec<u32> {
    let metric = data.metric();
    let mut kept: Vec<Neighbor> = Vec::with_capacity(max_degree);
    let origin = data.vector(node as usize);
    match selection {
        EdgeSelection::DistancePrune { alpha } => {
            // squared distances, squared factor
            let factor = if metric.is_euclidean() { alpha * alpha } else { 1.0 };
            for c in candidates {
                if kept.len() >= max_degree {
                    break;
                }
                let xc = data.vector(c.id as usize);
                let pruned = kept
                    .iter()
                    .any(|u| distance(data.vector(u.id as usize), xc, metric) * factor < c.distance);
                if !pruned {
                    kept.push(*c);
                }
            }
        }
        EdgeSelection::AnglePrune { min_angle_degrees } => {
            let max_cos = f64::from(min_angle_degrees).to_radians().cos();
            let norm = |x: &[f32]| diff_dot(x, x, origin).sqrt();
            let mut kept_norms: Vec<f64> = Vec::with_capacity(max_degree);
            for c in candidates {
                if kept.len() >= max_degree {
                    break;
                }
                let xc = data.vector(c.id as usize);
                let nc = norm(xc);
                let pruned = kept.iter().zip(&kept_norms).any(|(u, &nu)| {
                    if nc == 0.0 || nu == 0.0 {
                        return true;
                    }
                    let cos = diff_dot(xc, data.vector(u.id as usize), origin) / (nc * nu);
                    cos > max_cos
                });
                if !pruned {
                    kept.push(*c);
                    kept_norms.push(nc);
                }
            }
        }
    }
    kept.into_iter().map(|c| c.id).collect()
}

/// Node nearest to the dataset centroid (Euclidean, double precision). Ties go to the lower id.
pub fn choose_entry(data: &VectorDataset) -> u32 {
    let dim = data.padded_dim();
    let mut centroid = vec![0.0f64; dim];
    for i in 0..data.len() {
        for (c, &x) in centroid.iter_mut().zip(data.vector(i)) {
            *c += f64::from(x);
        }
    }
    let n = data.len().max(1) as f64;
    centroid.iter_mut().for_each(|c| *c /= n);
    let mut best = (f64::INFINITY, 0u32);
    for i in 0..data.len() {
        let d: f64 = centroid.iter().zip(data.vector(i)).map(|(c, &x)| (c - f64::from(x)).powi(2)).sum();
        if d < best.0 {
            best = (d, i as u32);
        }
    }
    best.1
}

/// Collects a deduplicated, sorted candidate pool for `node`.
struct PoolBuilder {
    stamp: Vec<u32>,
    epoch: u32,
    pool: Vec<Neighbor>,
    pending: Vec<u32>,
    scratch: SearchScratch,
}

impl PoolBuilder {
    fn new(n: usize) -> Self {
        Self {
            stamp: vec![0; n],
            epoch: 0,
            pool: Vec::new(),
            pending: Vec::new(),
            scratch: SearchScratch::default(),
        }
    }

    fn start(&mut self, node: u32) {
        self.epoch += 1;
        self.pool.clear();
        self.pending.clear();
        self.stamp[node as usize] = self.epoch;
    }

    fn push_known(&mut self, n: Neighbor) {
        if self.stamp[n.id as usize] != self.epoch {
            self.stamp[n.id as usize] = self.epoch;
            self.pool.push(n);
        }
    }

    fn push_id(&mut self, id: u32) {
        if self.stamp[id as usize] != self.epoch {
            self.stamp[id as usize] = self.epoch;
            self.pending.push(id);
        }
    }

    /// Adds the results of searching `graph` for `node`'s own vector.
    fn add_self_search(&mut self, graph: &ProximityGraph, data: &VectorDataset, node: u32, ef: usize) {
        let scorer = ExactScorer { query: data.vector(node as usize), data };
        let params = SearchParams::new(1, ef).with_batch(BatchSpec::for_dim(data.padded_dim()));
        traverse(graph, &scorer, &params, &mut self.scratch);
        let found: Vec<Neighbor> =
            self.scratch.queue().entries().iter().map(|c| Neighbor::new(c.id, c.distance)).collect();
        for c in found {
            self.push_known(c);
        }
    }

    fn finish(&mut self, data: &VectorDataset, node: u32, cap: usize) -> &[Neighbor] {
        let q = data.vector(node as usize);
        let metric = data.metric();
        for &id in &self.pending {
            self.pool.push(Neighbor::new(id, distance(q, data.vector(id as usize), metric)));
        }
        self.pool.sort_by(by_distance_then_id);
        self.pool.truncate(cap);
        &self.pool
    }
}

fn row_with_distances(graph: &ProximityGraph, data: &VectorDataset, v: u32) -> Vec<Neighbor> {
    let q = data.vector(v as usize);
    graph
        .neighbors(v)
        .iter()
        .map(|&u| Neighbor::new(u, distance(q, data.vector(u as usize), data.metric())))
        .collect()
}

/// Initial pruned graph: kNN lists plus self-search results, then reverse edges.
pub fn initial_graph(data: &VectorDataset, knn: &KnnGraph, params: &BuildParams, entry: u32) -> ProximityGraph {
    let n = data.len();
    let knn_graph = knn.as_graph(entry, data.metric());
    let mut graph = ProximityGraph::empty(n, params.max_degree, entry, data.metric());
    let mut pools = PoolBuilder::new(n);
    for v in 0..n as u32 {
        pools.start(v);
        for c in knn.neighbors(v) {
            pools.push_known(c);
        }
        pools.add_self_search(&knn_graph, data, v, params.build_ef);
        let pool = pools.finish(data, v, params.pool_cap());
        let row = select_edges(data, v, pool, params.selection, params.max_degree);
        graph.set_row(v, &row);
    }
    add_reverse_edges(&mut graph, data, params);
    graph
}

/// For every edge `u -> v`, offers `u` to `v`'s row; full rows are re-pruned.
fn add_reverse_edges(graph: &mut ProximityGraph, data: &VectorDataset, params: &BuildParams) {
    let n = graph.len();
    let mut incoming: Vec<Vec<u32>> = vec![Vec::new(); n];
    for (u, v) in graph.edges() {
        incoming[v as usize].push(u);
    }
    for v in 0..n as u32 {
        let mut row = row_with_distances(graph, data, v);
        let q = data.vector(v as usize);
        let mut changed = false;
        for &u in &incoming[v as usize] {
            if row.iter().any(|c| c.id == u) {
                continue;
            }
            row.push(Neighbor::new(u, distance(q, data.vector(u as usize), data.metric())));
            changed = true;
        }
        if !changed {
            continue;
        }
        row.sort_by(by_distance_then_id);
        let ids = if row.len() > params.max_degree {
            select_edges(data, v, &row, params.selection, params.max_degree)
        } else {
            row.iter().map(|c| c.id).collect()
        };
        graph.set_row(v, &ids);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefineReport {
    pub passes: usize,
    pub changed_rows: Vec<usize>,
    pub budget_exhausted: bool,
}

/// Iterative 2-hop refinement, at most `params.refine_iters` passes.
///
/// Nodes are processed in id order and each new row is visible to later nodes
/// in the same pass. Stops early when a pass changes no row or the budget runs out.
pub fn refine(graph: &mut ProximityGraph, data: &VectorDataset, params: &BuildParams) -> RefineReport {
    let mut report = RefineReport::default();
    let started = Instant::now();
    let mut pools = PoolBuilder::new(graph.len());
    for _ in 0..params.refine_iters {
        let mut changed = 0;
        for v in 0..graph.len() as u32 {
            pools.start(v);
            let q = data.vector(v as usize);
            for &u in graph.neighbors(v) {
                pools.push_known(Neighbor::new(u, distance(q, data.vector(u as usize), data.metric())));
            }
            for &u in graph.neighbors(v) {
                for &w in graph.neighbors(u) {
                    pools.push_id(w);
                }
            }
            pools.add_self_search(graph, data, v, params.build_ef);
            let pool = pools.finish(data, v, params.pool_cap());
            let row = select_edges(data, v, pool, params.selection, params.max_degree);
            if row.as_slice() != graph.neighbors(v) {
                graph.set_row(v, &row);
                changed += 1;
            }
        }
        report.passes += 1;
        report.changed_rows.push(changed);
        log::debug!("refine pass {}: {changed} rows changed", report.passes);
        if changed == 0 {
            break;
        }
        if params.refine_budget.is_some_and(|b| started.elapsed() >= b) {
            report.budget_exhausted = true;
            break;
        }
    }
    report
}

/// Links every node unreachable from the entry, returning the number of edges added.
///
/// The nearest reachable node gets an edge to the lowest-id unreachable node.
/// A full row evicts its worst edge, but only if that keeps every currently
/// reachable node reachable; otherwise the next-nearest reachable node is tried.
pub fn ensure_reachability(graph: &mut ProximityGraph, data: &VectorDataset) -> usize {
    let n = graph.len();
    let metric = data.metric();
    let mut added = 0;
    let mut reachable = graph.reachable_from(graph.entry());
    while let Some(target) = reachable.iter().position(|&r| !r) {
        let xt = data.vector(target);
        let mut sources: Vec<Neighbor> = (0..n)
            .filter(|&i| reachable[i])
            .map(|i| Neighbor::new(i as u32, distance(data.vector(i), xt, metric)))
            .collect();
        sources.sort_by(by_distance_then_id);
        let before = reachable.iter().filter(|&&r| r).count();

        let mut linked = false;
        for src in &sources {
            let mut row = graph.neighbors(src.id).to_vec();
            if row.len() < graph.degree() {
                row.push(target as u32);
                graph.set_row(src.id, &row);
                linked = true;
                break;
            }
            let mut by_dist = row_with_distances(graph, data, src.id);
            by_dist.sort_by(by_distance_then_id);
            let original = graph.neighbors(src.id).to_vec();
            for evict in by_dist.iter().rev() {
                let mut trial: Vec<u32> = original.iter().copied().filter(|&x| x != evict.id).collect();
                trial.push(target as u32);
                graph.set_row(src.id, &trial);
                let now = graph.reachable_from(graph.entry());
                let kept_all = reachable.iter().zip(&now).all(|(&was, &is)| !was || is);
                if kept_all && now.iter().filter(|&&r| r).count() > before {
                    linked = true;
                    break;
                }
                graph.set_row(src.id, &original);
            }
            if linked {
                break;
            }
        }
        assert!(linked, "no reachable node can link node {target}");
        added += 1;
        reachable = graph.reachable_from(graph.entry());
    }
    added
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub refine: RefineReport,
    pub reachability_edges: usize,
    pub entry: u32,
    pub mean_degree: f64,
    pub build_secs: f64,
}

/// Full construction pipeline.
pub fn build_graph(data: &VectorDataset, params: &BuildParams) -> Result<(ProximityGraph, BuildReport), GraphError> {
    params.validate()?;
    let started = Instant::now();
    let knn = build_knn_graph(data, params.knn, params.seed)?;
    let entry = choose_entry(data);
    let mut graph = initial_graph(data, &knn, params, entry);
    let refine_report = refine(&mut graph, data, params);
    let reachability_edges = ensure_reachability(&mut graph, data);
    graph.validate()?;
    let report = BuildReport {
        refine: refine_report,
        reachability_edges,
        entry,
        mean_degree: graph.edge_count() as f64 / graph.len().max(1) as f64,
        build_secs: started.elapsed().as_secs_f64(),
    };
    Ok((graph, report))
}

/// Uniform random points in `[0, 1)^dim`, seeded.
pub fn random_points(n: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..dim).map(|_| rng.gen::<f32>()).collect()).collect()
}
