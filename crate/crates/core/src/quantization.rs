//! Scalar and product quantization with asymmetric distance evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{Metric, VectorDataset};
use crate::distance::{distance, Prefetch};
use crate::graph::ProximityGraph;
use crate::search::{collect_top_k, traverse, QueryScorer, SearchError, SearchOutput, SearchParams, SearchScratch};

pub const SQ_LEVELS: usize = 256;
pub const PQ_CENTROIDS: usize = 256;
pub const DEFAULT_KMEANS_ITERS: usize = 25;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum QuantError {
    #[error("product quantization needs at least {PQ_CENTROIDS} training vectors, got {0}")]
    TooFewPoints(usize),
    #[error("invalid subspace count {m} for dimension {dim}")]
    InvalidSubspaces { m: usize, dim: usize },
    #[error("codes hold {codes} bytes, expected {expected}")]
    CodeLength { codes: usize, expected: usize },
    #[error("codec was trained for {codec} dimensions, data has {data}")]
    DimensionMismatch { codec: usize, data: usize },
    #[error("invalid codec: {0}")]
    Invalid(String),
}

/// Per-dimension 8-bit range coder.
#[derive(Debug, Clone, PartialEq)]
pub struct SqCodec {
    lo: Vec<f32>,
    hi: Vec<f32>,
}

impl SqCodec {
    /// Per-dimension min/max over the padded rows.
    pub fn train(data: &VectorDataset) -> Self {
        let d = data.padded_dim();
        let mut lo = vec![f32::INFINITY; d];
        let mut hi = vec![f32::NEG_INFINITY; d];
        for i in 0..data.len() {
            for ((l, h), &x) in lo.iter_mut().zip(hi.iter_mut()).zip(data.vector(i)) {
                *l = l.min(x);
                *h = h.max(x);
            }
        }
        Self { lo, hi }
    }

    pub fn from_bounds(lo: Vec<f32>, hi: Vec<f32>) -> Result<Self, QuantError> {
        if lo.len() != hi.len() || lo.iter().zip(&hi).any(|(l, h)| !(l <= h) || !l.is_finite() || !h.is_finite()) {
            return Err(QuantError::Invalid("scalar bounds must be finite with lo <= hi".into()));
        }
        Ok(Self { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn code_len(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f32] {
        &self.lo
    }

    pub fn hi(&self) -> &[f32] {
        &self.hi
    }

    #[inline]
    fn step(&self, j: usize) -> f32 {
        (self.hi[j] - self.lo[j]) / (SQ_LEVELS - 1) as f32
    }

    pub fn encode_into(&self, x: &[f32], out: &mut [u8]) {
        for (j, (o, &v)) in out.iter_mut().zip(x).enumerate() {
            let range = self.hi[j] - self.lo[j];
            *o = if range > 0.0 {
                ((v - self.lo[j]) / range * (SQ_LEVELS - 1) as f32).round().clamp(0.0, 255.0) as u8
            } else {
                0
            };
        }
    }

    pub fn encode(&self, x: &[f32]) -> Vec<u8> {
        let mut out = vec![0u8; self.dim()];
        self.encode_into(x, &mut out);
        out
    }

    #[inline]
    fn decode_one(&self, j: usize, c: u8) -> f32 {
        self.lo[j] + f32::from(c) * self.step(j)
    }

    pub fn decode(&self, codes: &[u8]) -> Vec<f32> {
        codes.iter().enumerate().map(|(j, &c)| self.decode_one(j, c)).collect()
    }

    /// Query-to-code distance, decoding on the fly.
    pub fn distance(&self, q: &[f32], codes: &[u8], metric: Metric) -> f32 {
        match metric {
            Metric::NegativeInnerProduct => {
                -codes.iter().enumerate().map(|(j, &c)| q[j] * self.decode_one(j, c)).sum::<f32>()
            }
            _ => codes
                .iter()
                .enumerate()
                .map(|(j, &c)| {
                    let d = q[j] - self.decode_one(j, c);
                    d * d
                })
                .sum(),
        }
    }
}

/// Product quantizer: `m` subspaces of `sub_dim` scalars, 256 centroids each.
#[derive(Debug, Clone)]
pub struct PqCodec {
    m: usize,
    sub_dim: usize,
    /// `m * 256 * sub_dim` values, codebook-major.
    centroids: Vec<f32>,
    /// Mean quantization error after each k-means iteration.
    history: Vec<f64>,
}

/// Equality covers the codebooks only, not the training history.
impl PartialEq for PqCodec {
    fn eq(&self, other: &Self) -> bool {
        self.m == other.m && self.sub_dim == other.sub_dim && self.centroids == other.centroids
    }
}

impl PqCodec {
    /// Trains one k-means codebook per subspace. When `m` does not divide the
    /// padded dimension, vectors are zero-extended to the next multiple of `m`.
    pub fn train(data: &VectorDataset, m: usize, iters: usize, seed: u64) -> Result<Self, QuantError> {
        let n = data.len();
        if n < PQ_CENTROIDS {
            return Err(QuantError::TooFewPoints(n));
        }
        let d = data.padded_dim();
        if m == 0 || m > d {
            return Err(QuantError::InvalidSubspaces { m, dim: d });
        }
        let sub_dim = d.div_ceil(m);
        let trained: Vec<(Vec<f32>, Vec<f64>)> = (0..m)
            .into_par_iter()
            .map(|j| {
                let mut points = vec![0.0f32; n * sub_dim];
                for i in 0..n {
                    let src = subvector(data.vector(i), j, sub_dim);
                    points[i * sub_dim..i * sub_dim + src.len()].copy_from_slice(src);
                }
                kmeans(&points, sub_dim, PQ_CENTROIDS, iters, seed.wrapping_add(j as u64))
            })
            .collect();
        let rounds = trained.iter().map(|t| t.1.len()).max().unwrap_or(0);
        let mut history = vec![0.0f64; rounds];
        let mut centroids = Vec::with_capacity(m * PQ_CENTROIDS * sub_dim);
        for (c, h) in trained {
            centroids.extend_from_slice(&c);
            for (r, slot) in history.iter_mut().enumerate() {
                *slot += h.get(r).or(h.last()).copied().unwrap_or(0.0) / n as f64;
            }
        }
        Ok(Self { m, sub_dim, centroids, history })
    }

    pub fn from_parts(m: usize, sub_dim: usize, centroids: Vec<f32>) -> Result<Self, QuantError> {
        if m == 0 || sub_dim == 0 || m.checked_mul(sub_dim).and_then(|x| x.checked_mul(PQ_CENTROIDS)) != Some(centroids.len()) {
            return Err(QuantError::Invalid(format!("{} centroid values for m={m}, sub_dim={sub_dim}", centroids.len())));
        }
        Ok(Self { m, sub_dim, centroids, history: Vec::new() })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn sub_dim(&self) -> usize {
        self.sub_dim
    }

    pub fn code_len(&self) -> usize {
        self.m
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    pub fn objective_history(&self) -> &[f64] {
        &self.history
    }

    #[inline]
    fn centroid(&self, j: usize, c: usize) -> &[f32] {
        let start = (j * PQ_CENTROIDS + c) * self.sub_dim;
        &self.centroids[start..start + self.sub_dim]
    }

    pub fn encode_into(&self, x: &[f32], out: &mut [u8]) {
        for (j, o) in out.iter_mut().enumerate().take(self.m) {
            let sub = subvector(x, j, self.sub_dim);
            let mut best = (f32::INFINITY, 0usize);
            for c in 0..PQ_CENTROIDS {
                let d = l2_prefix(sub, self.centroid(j, c));
                if d < best.0 {
                    best = (d, c);
                }
            }
            *o = best.1 as u8;
        }
    }

    pub fn encode(&self, x: &[f32]) -> Vec<u8> {
        let mut out = vec![0u8; self.m];
        self.encode_into(x, &mut out);
        out
    }

    /// Reconstruction, `m * sub_dim` long.
    pub fn decode(&self, codes: &[u8]) -> Vec<f32> {
        codes.iter().enumerate().flat_map(|(j, &c)| self.centroid(j, c as usize).iter().copied()).collect()
    }

    pub fn adc_table(&self, q: &[f32], metric: Metric) -> AdcTable {
        let mut values = Vec::with_capacity(self.m * PQ_CENTROIDS);
        let mut qsub = vec![0.0f32; self.sub_dim];
        for j in 0..self.m {
            let src = subvector(q, j, self.sub_dim);
            qsub.fill(0.0);
            qsub[..src.len()].copy_from_slice(src);
            for c in 0..PQ_CENTROIDS {
                values.push(distance(&qsub, self.centroid(j, c), metric));
            }
        }
        AdcTable { m: self.m, values }
    }
}

/// Subspace `j` of `x`, possibly shorter than `sub_dim` past the end of `x`.
#[inline]
fn subvector(x: &[f32], j: usize, sub_dim: usize) -> &[f32] {
    let start = (j * sub_dim).min(x.len());
    &x[start..(start + sub_dim).min(x.len())]
}

/// Squared distance over `a`, treating missing tail entries of `a` as zero.
#[inline]
fn l2_prefix(a: &[f32], b: &[f32]) -> f32 {
    let head: f32 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    head + b[a.len()..].iter().map(|y| y * y).sum::<f32>()
}

#[inline]
fn sq64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2)).sum()
}

/// Lloyd's k-means with k-means++ seeding. Returns the centroids and the
/// summed squared error after each iteration.
fn kmeans(points: &[f32], dim: usize, k: usize, iters: usize, seed: u64) -> (Vec<f32>, Vec<f64>) {
    let n = points.len() / dim;
    let point = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids = Vec::with_capacity(k * dim);
    let mut nearest = vec![f64::INFINITY; n];
    let mut pick = rng.gen_range(0..n);
    for c in 0..k {
        centroids.extend_from_slice(point(pick));
        let cen = &centroids[c * dim..(c + 1) * dim];
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq64(point(i), cen));
        }
        let total: f64 = nearest.iter().sum();
        pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if d > 0.0 && target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            if nearest[chosen] == 0.0 {
                chosen = (0..n).rev().find(|&i| nearest[i] > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
    }

    let mut assign = vec![usize::MAX; n];
    let mut err = vec![0.0f64; n];
    let mut history = Vec::with_capacity(iters);
    for _ in 0..iters {
        let mut changed = false;
        for i in 0..n {
            let p = point(i);
            let mut best = (f64::INFINITY, 0usize);
            for c in 0..k {
                let d = sq64(p, &centroids[c * dim..(c + 1) * dim]);
                if d < best.0 {
                    best = (d, c);
                }
            }
            // keep the current cluster on ties so the objective cannot rise
            if assign[i] != usize::MAX && best.1 != assign[i] {
                let cur = sq64(p, &centroids[assign[i] * dim..(assign[i] + 1) * dim]);
                if cur <= best.0 {
                    best = (cur, assign[i]);
                }
            }
            changed |= assign[i] != best.1;
            assign[i] = best.1;
            err[i] = best.0;
        }

        let mut counts = vec![0usize; k];
        for &a in &assign {
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..n).filter(|&i| counts[assign[i]] > 1).max_by(|&a, &b| err[a].total_cmp(&err[b]).then(b.cmp(&a)));
            if let Some(i) = far.filter(|&i| err[i] > 0.0) {
                counts[assign[i]] -= 1;
                counts[c] = 1;
                assign[i] = c;
                err[i] = 0.0;
                centroids[c * dim..(c + 1) * dim].copy_from_slice(point(i));
                changed = true;
            }
        }

        let mut sums = vec![0.0f64; k * dim];
        for (i, &a) in assign.iter().enumerate() {
            for (s, &x) in sums[a * dim..(a + 1) * dim].iter_mut().zip(point(i)) {
                *s += f64::from(x);
            }
        }
        let mut old_sse = vec![0.0f64; k];
        let mut new_sse = vec![0.0f64; k];
        let sizes = &counts;
        let means: Vec<f32> = sums
            .chunks(dim)
            .enumerate()
            .flat_map(|(c, s)| s.iter().map(move |&v| if sizes[c] > 0 { (v / sizes[c] as f64) as f32 } else { 0.0 }))
            .collect();
        for (i, &a) in assign.iter().enumerate() {
            old_sse[a] += err[i];
            new_sse[a] += sq64(point(i), &means[a * dim..(a + 1) * dim]);
        }
        for c in 0..k {
            if counts[c] > 0 && new_sse[c] <= old_sse[c] {
                centroids[c * dim..(c + 1) * dim].copy_from_slice(&means[c * dim..(c + 1) * dim]);
            }
        }
        let sse: f64 = (0..k).map(|c| if counts[c] > 0 { new_sse[c].min(old_sse[c]) } else { 0.0 }).sum();
        history.push(sse);
        if !changed {
            break;
        }
    }
    (centroids, history)
}

/// Per-query table of partial distances, `m x 256`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdcTable {
    m: usize,
    values: Vec<f32>,
}

impl AdcTable {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn entry(&self, j: usize, c: u8) -> f32 {
        self.values[j * PQ_CENTROIDS + c as usize]
    }

    #[inline]
    pub fn distance(&self, codes: &[u8]) -> f32 {
        codes.iter().enumerate().map(|(j, &c)| self.values[j * PQ_CENTROIDS + c as usize]).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Codec {
    Sq(SqCodec),
    Pq(PqCodec),
}

/// Codec choice before training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodecKind {
    Sq8,
    Pq { m: usize },
}

impl std::str::FromStr for CodecKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sq8" => Ok(Self::Sq8),
            _ => match s.strip_prefix("pq:") {
                Some(m) => m.parse().map(|m| Self::Pq { m }).map_err(|_| format!("bad subspace count in {s:?}")),
                None => Err(format!("unknown codec {s:?}, expected sq8 or pq:<m>")),
            },
        }
    }
}

impl std::fmt::Display for CodecKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Sq8 => f.write_str("sq8"),
            Self::Pq { m } => write!(f, "pq:{m}"),
        }
    }
}

impl Codec {
    pub fn train(data: &VectorDataset, kind: CodecKind, seed: u64) -> Result<Self, QuantError> {
        Ok(match kind {
            CodecKind::Sq8 => Self::Sq(SqCodec::train(data)),
            CodecKind::Pq { m } => Self::Pq(PqCodec::train(data, m, DEFAULT_KMEANS_ITERS, seed)?),
        })
    }

    pub fn code_len(&self) -> usize {
        match self {
            Self::Sq(c) => c.code_len(),
            Self::Pq(c) => c.code_len(),
        }
    }

    pub fn encode_into(&self, x: &[f32], out: &mut [u8]) {
        match self {
            Self::Sq(c) => c.encode_into(x, out),
            Self::Pq(c) => c.encode_into(x, out),
        }
    }

    pub fn decode(&self, codes: &[u8]) -> Vec<f32> {
        match self {
            Self::Sq(c) => c.decode(codes),
            Self::Pq(c) => c.decode(codes),
        }
    }
}

/// Default PQ subspace count: a quarter of the padded dimension.
pub fn default_pq_m(padded_dim: usize) -> usize {
    (padded_dim / 4).max(1)
}

/// Encoded copy of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedVectors {
    codec: Codec,
    metric: Metric,
    code_len: usize,
    codes: Vec<u8>,
}

impl QuantizedVectors {
    pub fn encode(codec: Codec, data: &VectorDataset) -> Self {
        let code_len = codec.code_len();
        let mut codes = vec![0u8; code_len * data.len()];
        codes.par_chunks_mut(code_len.max(1)).enumerate().for_each(|(i, out)| codec.encode_into(data.vector(i), out));
        Self { codec, metric: data.metric(), code_len, codes }
    }

    pub fn from_parts(codec: Codec, metric: Metric, count: usize, codes: Vec<u8>) -> Result<Self, QuantError> {
        let code_len = codec.code_len();
        let expected = code_len.checked_mul(count).ok_or(QuantError::CodeLength { codes: codes.len(), expected: usize::MAX })?;
        if codes.len() != expected {
            return Err(QuantError::CodeLength { codes: codes.len(), expected });
        }
        Ok(Self { codec, metric, code_len, codes })
    }

    pub fn codec(&self) -> &Codec {
        &self.codec
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn len(&self) -> usize {
        self.codes.len().checked_div(self.code_len).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn code(&self, i: usize) -> &[u8] {
        &self.codes[i * self.code_len..(i + 1) * self.code_len]
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    /// Reassembles node order: row `j` becomes old row `order[j]`.
    pub fn gather(&self, order: &[u32]) -> Self {
        let mut codes = Vec::with_capacity(self.codes.len());
        for &i in order {
            codes.extend_from_slice(self.code(i as usize));
        }
        Self { codec: self.codec.clone(), metric: self.metric, code_len: self.code_len, codes }
    }

    /// Approximate distances from a padded query to every listed id.
    pub fn scorer<'a>(&'a self, query: &'a [f32]) -> QuantScorer<'a> {
        match &self.codec {
            Codec::Sq(sq) => QuantScorer { codes: self, inner: Inner::Sq { sq, query } },
            Codec::Pq(pq) => QuantScorer { codes: self, inner: Inner::Pq(pq.adc_table(query, self.metric)) },
        }
    }
}

enum Inner<'a> {
    Sq { sq: &'a SqCodec, query: &'a [f32] },
    Pq(AdcTable),
}

pub struct QuantScorer<'a> {
    codes: &'a QuantizedVectors,
    inner: Inner<'a>,
}

impl QueryScorer for QuantScorer<'_> {
    fn score(&self, ids: &[u32], out: &mut [f32]) {
        match &self.inner {
            Inner::Sq { sq, query } => {
                for (o, &id) in out.iter_mut().zip(ids) {
                    *o = sq.distance(query, self.codes.code(id as usize), self.codes.metric);
                }
            }
            Inner::Pq(table) => {
                for (o, &id) in out.iter_mut().zip(ids) {
                    *o = table.distance(self.codes.code(id as usize));
                }
            }
        }
    }

    fn prefetch(&self, id: u32, hint: Prefetch) {
        hint.hint(self.codes.code(id as usize));
    }
}

/// Traversal on codes, then exact re-scoring of the best `rerank` candidates.
///
/// `rerank == 0` returns approximate distances. A positive value below `k`
/// is raised to `k`.
pub fn adc_search(
    graph: &ProximityGraph,
    codes: &QuantizedVectors,
    data: &VectorDataset,
    query: &[f32],
    params: &SearchParams,
    rerank: usize,
    scratch: &mut SearchScratch,
) -> Result<SearchOutput, SearchError> {
    params.validate()?;
    if graph.len() != codes.len() || graph.len() != data.len() {
        return Err(SearchError::SizeMismatch { graph: graph.len(), data: codes.len() });
    }
    if query.len() != data.padded_dim() {
        return Err(SearchError::UnpaddedQuery { expected: data.padded_dim(), found: query.len() });
    }
    let scorer = codes.scorer(query);
    let stats = traverse(graph, &scorer, params, scratch);
    if rerank == 0 {
        return Ok(collect_top_k(scratch.queue(), params.k, graph.len(), stats));
    }
    let take = rerank.max(params.k).min(scratch.queue().len());
    let mut exact: Vec<(f32, u32)> = scratch.queue().entries()[..take]
        .iter()
        .map(|c| (distance(query, data.vector(c.id as usize), data.metric()), c.id))
        .collect();
    exact.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    exact.truncate(params.k);
    Ok(SearchOutput {
        ids: exact.iter().map(|e| e.1).collect(),
        distances: exact.iter().map(|e| e.0).collect(),
        stats,
        truncated: params.k > graph.len(),
    })
}
