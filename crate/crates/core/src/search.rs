//! Best-first graph traversal with batched distance evaluation and
//! insertion-position early termination.

use std::time::{Duration, Instant};

use thiserror::Error;

use crate::dataset::{QuerySet, VectorDataset};
use crate::distance::{gather_and_batch, BatchSpec, Prefetch};
use crate::graph::ProximityGraph;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SearchError {
    #[error("query has {found} scalars, expected padded dimension {expected}")]
    UnpaddedQuery { expected: usize, found: usize },
    #[error("invalid search parameters: {0}")]
    InvalidParams(String),
    #[error("graph has {graph} nodes but dataset has {data}")]
    SizeMismatch { graph: usize, data: usize },
}

/// One queue slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub id: u32,
    pub distance: f32,
    pub visited: bool,
}

/// Bounded, ascending-distance candidate list of capacity `L`.
///
/// Insert positions are 1-based. An element equal in distance to incumbents
/// lands after them; a position past `L` means the insert was rejected.
#[derive(Debug, Clone)]
pub struct CandidateQueue {
    capacity: usize,
    entries: Vec<Candidate>,
    cursor: usize,
}

impl CandidateQueue {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "queue capacity must be positive");
        Self {
            capacity,
            entries: Vec::with_capacity(capacity + 1),
            cursor: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.cursor = 0;
    }

    /// Resets and changes the capacity.
    pub fn reset(&mut self, capacity: usize) {
        assert!(capacity > 0, "queue capacity must be positive");
        self.capacity = capacity;
        self.clear();
    }

    pub fn entries(&self) -> &[Candidate] {
        &self.entries
    }

    /// Returns the 1-based insert position `p`; `p == capacity + 1` means rejected.
    pub fn insert(&mut self, id: u32, distance: f32) -> usize {
        debug_assert!(self.entries.iter().all(|c| c.id != id), "duplicate id {id} in queue");
        let pos = self.entries.partition_point(|c| c.distance <= distance);
        if pos >= self.capacity {
            return self.capacity + 1;
        }
        self.entries.insert(pos, Candidate { id, distance, visited: false });
        if self.entries.len() > self.capacity {
            self.entries.pop();
        }
        if pos < self.cursor {
            self.cursor = pos;
        }
        pos + 1
    }

    pub fn has_unvisited(&self) -> bool {
        self.cursor < self.entries.len()
    }

    /// Marks and returns the nearest unvisited entry.
    pub fn pop_nearest_unvisited(&mut self) -> Option<u32> {
        let slot = self.entries.get_mut(self.cursor)?;
        slot.visited = true;
        let id = slot.id;
        self.advance_cursor();
        Some(id)
    }

    pub fn peek_nearest_unvisited(&self) -> Option<u32> {
        self.entries.get(self.cursor).map(|c| c.id)
    }

    fn advance_cursor(&mut self) {
        while self.cursor < self.entries.len() && self.entries[self.cursor].visited {
            self.cursor += 1;
        }
    }
}

/// Stop once `patience` consecutive insert attempts land past position `threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EarlyTermination {
    pub threshold: usize,
    pub patience: usize,
}

/// True iff the last `patience` positions all exceed `threshold`.
pub fn early_term_check(positions: &[usize], threshold: usize, patience: usize) -> bool {
    patience >= 1 && positions.len() >= patience && positions[positions.len() - patience..].iter().all(|&p| p > threshold)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchParams {
    pub k: usize,
    /// Queue capacity `L` (a.k.a. efs).
    pub ef: usize,
    pub batch: BatchSpec,
    pub early_term: Option<EarlyTermination>,
    pub prefetch: Prefetch,
}

impl SearchParams {
    pub fn new(k: usize, ef: usize) -> Self {
        Self {
            k,
            ef,
            batch: BatchSpec::SCALAR,
            early_term: None,
            prefetch: Prefetch::Off,
        }
    }

    pub fn with_batch(mut self, batch: BatchSpec) -> Self {
        self.batch = batch;
        self
    }

    pub fn with_early_term(mut self, early_term: Option<EarlyTermination>) -> Self {
        self.early_term = early_term;
        self
    }

    pub fn with_prefetch(mut self, prefetch: Prefetch) -> Self {
        self.prefetch = prefetch;
        self
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        if self.k == 0 {
            return Err(SearchError::InvalidParams("k must be positive".into()));
        }
        if self.k > self.ef {
            return Err(SearchError::InvalidParams(format!("k = {} exceeds queue size {}", self.k, self.ef)));
        }
        if let Some(et) = self.early_term {
            if et.threshold >= self.ef {
                return Err(SearchError::InvalidParams(format!(
                    "early-termination threshold {} must be below queue size {}",
                    et.threshold, self.ef
                )));
            }
            if et.patience == 0 {
                return Err(SearchError::InvalidParams("early-termination patience must be >= 1".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SearchStats {
    pub distance_computations: u64,
    pub hops: u64,
    /// 1-based position of every insert attempt; `ef + 1` for rejections.
    pub insert_positions: Vec<usize>,
    pub terminated_early: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutput {
    pub ids: Vec<u32>,
    pub distances: Vec<f32>,
    pub stats: SearchStats,
    /// Set when `k` exceeded the number of indexed vectors and fewer were returned.
    pub truncated: bool,
}

/// Distances from one query to arbitrary node ids.
pub trait QueryScorer {
    fn score(&self, ids: &[u32], out: &mut [f32]);

    fn prefetch(&self, _id: u32, _hint: Prefetch) {}
}

/// Exact distances against the raw vectors.
pub struct ExactScorer<'a> {
    pub query: &'a [f32],
    pub data: &'a VectorDataset,
}

impl QueryScorer for ExactScorer<'_> {
    #[inline]
    fn score(&self, ids: &[u32], out: &mut [f32]) {
        gather_and_batch(self.query, self.data, ids, out);
    }

    #[inline]
    fn prefetch(&self, id: u32, hint: Prefetch) {
        hint.hint(self.data.vector(id as usize));
    }
}

/// Epoch-stamped "distance computed" table.
#[derive(Debug, Clone, Default)]
struct VisitedTable {
    stamps: Vec<u32>,
    epoch: u32,
}

impl VisitedTable {
    fn start(&mut self, n: usize) {
        if self.stamps.len() != n {
            self.stamps = vec![0; n];
            self.epoch = 0;
        }
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.stamps.fill(0);
            self.epoch = 1;
        }
    }

    /// Marks `id`; returns false if it was already marked this epoch.
    #[inline]
    fn mark(&mut self, id: u32) -> bool {
        let slot = &mut self.stamps[id as usize];
        if *slot == self.epoch {
            false
        } else {
            *slot = self.epoch;
            true
        }
    }
}

/// Per-worker reusable buffers.
#[derive(Debug, Clone)]
pub struct SearchScratch {
    queue: CandidateQueue,
    visited: VisitedTable,
    ids: Vec<u32>,
    dists: Vec<f32>,
}

impl Default for SearchScratch {
    fn default() -> Self {
        Self {
            queue: CandidateQueue::new(1),
            visited: VisitedTable::default(),
            ids: Vec::new(),
            dists: Vec::new(),
        }
    }
}

impl SearchScratch {
    pub fn queue(&self) -> &CandidateQueue {
        &self.queue
    }
}

/// Runs the traversal, leaving the final queue in `scratch`.
pub fn traverse<S: QueryScorer>(
    graph: &ProximityGraph,
    scorer: &S,
    params: &SearchParams,
    scratch: &mut SearchScratch,
) -> SearchStats {
    let mut stats = SearchStats::default();
    let SearchScratch { queue, visited, ids, dists } = scratch;
    queue.reset(params.ef);
    visited.start(graph.len());
    let width = params.batch.effective_width(graph.degree());
    let mut run = 0usize;

    let entry = graph.entry();
    visited.mark(entry);
    let mut d = [0.0f32];
    scorer.score(&[entry], &mut d);
    stats.distance_computations += 1;
    let p = queue.insert(entry, d[0]);
    stats.insert_positions.push(p);

    // Records an insert attempt; returns true when early termination fires.
    let mut record = |p: usize, stats: &mut SearchStats| -> bool {
        stats.insert_positions.push(p);
        match params.early_term {
            Some(et) => {
                run = if p > et.threshold { run + 1 } else { 0 };
                run >= et.patience
            }
            None => false,
        }
    };

    'outer: while let Some(v) = queue.pop_nearest_unvisited() {
        stats.hops += 1;
        let row = graph.neighbors(v);
        params.prefetch.hint(row);
        ids.clear();
        for &u in row {
            if visited.mark(u) {
                ids.push(u);
            }
        }
        for chunk in ids.chunks(width) {
            for &u in chunk {
                scorer.prefetch(u, params.prefetch);
            }
            dists.clear();
            dists.resize(chunk.len(), 0.0);
            scorer.score(chunk, dists);
            stats.distance_computations += chunk.len() as u64;
            for (&u, &du) in chunk.iter().zip(dists.iter()) {
                let p = queue.insert(u, du);
                if record(p, &mut stats) {
                    stats.terminated_early = true;
                    break 'outer;
                }
            }
        }
        if let Some(next) = queue.peek_nearest_unvisited() {
            params.prefetch.hint(graph.neighbors(next));
        }
    }
    stats
}

/// Exact-distance search for one padded query.
pub fn search(
    graph: &ProximityGraph,
    data: &VectorDataset,
    query: &[f32],
    params: &SearchParams,
) -> Result<SearchOutput, SearchError> {
    let mut scratch = SearchScratch::default();
    search_with_scratch(graph, data, query, params, &mut scratch)
}

pub fn search_with_scratch(
    graph: &ProximityGraph,
    data: &VectorDataset,
    query: &[f32],
    params: &SearchParams,
    scratch: &mut SearchScratch,
) -> Result<SearchOutput, SearchError> {
    params.validate()?;
    if graph.len() != data.len() {
        return Err(SearchError::SizeMismatch { graph: graph.len(), data: data.len() });
    }
    if query.len() != data.padded_dim() {
        return Err(SearchError::UnpaddedQuery { expected: data.padded_dim(), found: query.len() });
    }
    let scorer = ExactScorer { query, data };
    let stats = traverse(graph, &scorer, params, scratch);
    Ok(collect_top_k(scratch.queue(), params.k, graph.len(), stats))
}

pub(crate) fn collect_top_k(queue: &CandidateQueue, k: usize, n: usize, stats: SearchStats) -> SearchOutput {
    let take = k.min(queue.len());
    let entries = &queue.entries()[..take];
    SearchOutput {
        ids: entries.iter().map(|c| c.id).collect(),
        distances: entries.iter().map(|c| c.distance).collect(),
        stats,
        truncated: k > n,
    }
}

/// Results of searching many queries.
#[derive(Debug, Clone, Default)]
pub struct BatchOutput {
    pub results: Vec<SearchOutput>,
    pub latencies: Vec<Duration>,
    pub wall: Duration,
}

impl BatchOutput {
    pub fn qps(&self) -> f64 {
        let secs = self.wall.as_secs_f64();
        if self.results.is_empty() || secs <= 0.0 {
            0.0
        } else {
            self.results.len() as f64 / secs
        }
    }

    pub fn id_matrix(&self) -> Vec<Vec<u32>> {
        self.results.iter().map(|r| r.ids.clone()).collect()
    }

    pub fn mean_distance_computations(&self) -> f64 {
        mean(self.results.iter().map(|r| r.stats.distance_computations as f64))
    }

    pub fn mean_hops(&self) -> f64 {
        mean(self.results.iter().map(|r| r.stats.hops as f64))
    }
}

fn mean(it: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = it.len();
    if n == 0 {
        0.0
    } else {
        it.sum::<f64>() / n as f64
    }
}

/// Searches every query, handing them to `workers` threads from a shared counter.
///
/// `run` receives a query index and a worker-private scratch. Output order
/// follows query order regardless of which worker ran a query.
pub fn dispatch<F>(count: usize, workers: usize, run: F) -> Result<BatchOutput, SearchError>
where
    F: Fn(usize, &mut SearchScratch) -> Result<SearchOutput, SearchError> + Sync,
{
    use std::sync::atomic::{AtomicUsize, Ordering};

    let workers = workers.clamp(1, count.max(1));
    let next = AtomicUsize::new(0);
    let start = Instant::now();
    let mut per_worker: Vec<Result<Vec<(usize, SearchOutput, Duration)>, SearchError>> = Vec::with_capacity(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut scratch = SearchScratch::default();
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= count {
                            break;
                        }
                        let t = Instant::now();
                        let out = run(i, &mut scratch)?;
                        done.push((i, out, t.elapsed()));
                    }
                    Ok(done)
                })
            })
            .collect();
        for h in handles {
            per_worker.push(h.join().expect("search worker panicked"));
        }
    });
    let wall = start.elapsed();

    let mut slots: Vec<Option<(SearchOutput, Duration)>> = vec![None; count];
    for part in per_worker {
        for (i, out, lat) in part? {
            slots[i] = Some((out, lat));
        }
    }
    let (results, latencies) = slots.into_iter().map(|s| s.expect("every query is searched")).unzip();
    Ok(BatchOutput { results, latencies, wall })
}

/// Exact-distance search of a whole query set on `workers` threads.
pub fn batch_search(
    graph: &ProximityGraph,
    data: &VectorDataset,
    queries: &QuerySet,
    params: &SearchParams,
    workers: usize,
) -> Result<BatchOutput, SearchError> {
    params.validate()?;
    dispatch(queries.len(), workers, |i, scratch| {
        search_with_scratch(graph, data, queries.query(i), params, scratch)
    })
}
