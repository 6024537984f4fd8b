//! A searchable index (graph, vectors, optional renumbering and codes) and the
//! configure / add / build / search handle around it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DataError, Metric, QuerySet, RawVectors, VectorDataset};
use crate::graph::{build_graph, BuildParams, BuildReport, GraphError, ProximityGraph};
use crate::quantization::{adc_search, Codec, CodecKind, QuantError, QuantizedVectors};
use crate::reorder::{self, apply_permutation, bandwidth, Permutation, ReorderError};
use crate::search::{
    dispatch, search_with_scratch, BatchOutput, EarlyTermination, SearchError, SearchOutput, SearchParams, SearchScratch,
};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Reorder(#[from] ReorderError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error("{op} is not allowed while the index is {state}")]
    WrongState { op: &'static str, state: Lifecycle },
    #[error("index has no quantized codes")]
    NoCodes,
    #[error("inconsistent index: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReorderKind {
    #[default]
    None,
    Mst,
    Random,
    Bfs,
}

impl FromStr for ReorderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "mst" => Ok(Self::Mst),
            "random" => Ok(Self::Random),
            "bfs" => Ok(Self::Bfs),
            _ => Err(format!("unknown reorder {s:?}, expected none, mst, random or bfs")),
        }
    }
}

impl fmt::Display for ReorderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Mst => "mst",
            Self::Random => "random",
            Self::Bfs => "bfs",
        })
    }
}

/// Early-termination setting found by the tuner for a given queue size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TunedEarlyTerm {
    pub ef: usize,
    pub threshold: usize,
    pub patience: usize,
}

impl TunedEarlyTerm {
    pub fn rule(&self) -> EarlyTermination {
        EarlyTermination { threshold: self.threshold, patience: self.patience }
    }
}

/// How distances are evaluated during traversal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scoring {
    Exact,
    /// Traverse on codes, then re-score the best `rerank` exactly (0 disables).
    Codes { rerank: usize },
}

/// Graph and vectors in internal (possibly renumbered) order.
#[derive(Debug, Clone, PartialEq)]
pub struct Index {
    graph: ProximityGraph,
    data: VectorDataset,
    /// Maps original ids to internal positions.
    permutation: Option<Permutation>,
    codes: Option<QuantizedVectors>,
    early_term: Option<TunedEarlyTerm>,
}

/// Outcome of [`Index::build`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BuildSummary {
    pub graph: BuildReport,
    pub reorder: ReorderKind,
    pub bandwidth_before: usize,
    pub bandwidth_after: usize,
    pub mean_span_before: f64,
    pub mean_span_after: f64,
    pub codec: Option<String>,
}

impl Index {
    pub fn new(graph: ProximityGraph, data: VectorDataset) -> Result<Self, IndexError> {
        Self::from_parts(graph, data, None, None, None)
    }

    /// Assembles and validates an index.
    pub fn from_parts(
        graph: ProximityGraph,
        data: VectorDataset,
        permutation: Option<Permutation>,
        codes: Option<QuantizedVectors>,
        early_term: Option<TunedEarlyTerm>,
    ) -> Result<Self, IndexError> {
        let index = Self { graph, data, permutation, codes, early_term };
        index.validate()?;
        Ok(index)
    }

    pub fn validate(&self) -> Result<(), IndexError> {
        let n = self.data.len();
        if self.graph.len() != n {
            return Err(IndexError::Inconsistent(format!("graph has {} nodes, dataset {n}", self.graph.len())));
        }
        if self.graph.metric() != self.data.metric() {
            return Err(IndexError::Inconsistent("graph and dataset metrics differ".into()));
        }
        self.graph.validate()?;
        if let Some(p) = &self.permutation {
            if p.len() != n {
                return Err(IndexError::Inconsistent(format!("permutation covers {} of {n} nodes", p.len())));
            }
        }
        if let Some(c) = &self.codes {
            if c.len() != n {
                return Err(IndexError::Inconsistent(format!("{} codes for {n} vectors", c.len())));
            }
        }
        if let Some(t) = self.early_term {
            SearchParams::new(1, t.ef).with_early_term(Some(t.rule())).validate()?;
        }
        Ok(())
    }

    /// Full pipeline: build the graph, optionally renumber, optionally encode.
    pub fn build(
        data: VectorDataset,
        params: &BuildParams,
        reorder_kind: ReorderKind,
        codec: Option<CodecKind>,
    ) -> Result<(Self, BuildSummary), IndexError> {
        let (graph, report) = build_graph(&data, params)?;
        let identity = Permutation::identity(graph.len());
        let bandwidth_before = bandwidth(&graph, &identity);
        let mean_span_before = reorder::mean_edge_span(&graph, &identity);
        let original = graph.clone();
        let mut index = Self { graph, data, permutation: None, codes: None, early_term: None };
        index.reorder(reorder_kind, params.seed)?;
        let forward = index.permutation.clone().unwrap_or(identity);
        let bandwidth_after = bandwidth(&original, &forward);
        let mean_span_after = reorder::mean_edge_span(&original, &forward);
        if let Some(kind) = codec {
            index.quantize(kind, params.seed)?;
        }
        index.validate()?;
        let summary = BuildSummary {
            graph: report,
            reorder: reorder_kind,
            bandwidth_before,
            bandwidth_after,
            mean_span_before,
            mean_span_after,
            codec: codec.map(|c| c.to_string()),
        };
        Ok((index, summary))
    }

    /// Renumbers the index in place. Codes are carried along.
    pub fn reorder(&mut self, kind: ReorderKind, seed: u64) -> Result<(), IndexError> {
        let perm = match kind {
            ReorderKind::None => return Ok(()),
            ReorderKind::Mst => reorder::reorder(&self.graph, &self.data)?,
            ReorderKind::Random => reorder::random_permutation(self.graph.len(), seed),
            ReorderKind::Bfs => reorder::bfs_permutation(&self.graph),
        };
        self.apply(&perm)
    }

    /// Applies a permutation of the current internal order.
    pub fn apply(&mut self, perm: &Permutation) -> Result<(), IndexError> {
        let (graph, data) = apply_permutation(&self.graph, &self.data, perm)?;
        self.graph = graph;
        self.data = data;
        if let Some(codes) = &self.codes {
            self.codes = Some(codes.gather(perm.inverse()));
        }
        self.permutation = Some(match &self.permutation {
            Some(prev) => prev.then(perm),
            None => perm.clone(),
        });
        Ok(())
    }

    pub fn quantize(&mut self, kind: CodecKind, seed: u64) -> Result<(), IndexError> {
        let codec = Codec::train(&self.data, kind, seed)?;
        self.codes = Some(QuantizedVectors::encode(codec, &self.data));
        Ok(())
    }

    pub fn set_codes(&mut self, codes: Option<QuantizedVectors>) -> Result<(), IndexError> {
        if let Some(c) = &codes {
            if c.len() != self.len() {
                return Err(IndexError::Inconsistent(format!("{} codes for {} vectors", c.len(), self.len())));
            }
        }
        self.codes = codes;
        Ok(())
    }

    pub fn set_early_term(&mut self, tuned: Option<TunedEarlyTerm>) -> Result<(), IndexError> {
        if let Some(t) = tuned {
            SearchParams::new(1, t.ef).with_early_term(Some(t.rule())).validate()?;
        }
        self.early_term = tuned;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn graph(&self) -> &ProximityGraph {
        &self.graph
    }

    pub fn data(&self) -> &VectorDataset {
        &self.data
    }

    pub fn metric(&self) -> Metric {
        self.data.metric()
    }

    pub fn permutation(&self) -> Option<&Permutation> {
        self.permutation.as_ref()
    }

    pub fn codes(&self) -> Option<&QuantizedVectors> {
        self.codes.as_ref()
    }

    pub fn early_term(&self) -> Option<TunedEarlyTerm> {
        self.early_term
    }

    /// Internal position of original id `id`.
    pub fn internal_id(&self, id: u32) -> u32 {
        self.permutation.as_ref().map_or(id, |p| p.forward()[id as usize])
    }

    /// Original id of internal position `pos`.
    pub fn original_id(&self, pos: u32) -> u32 {
        self.permutation.as_ref().map_or(pos, |p| p.inverse()[pos as usize])
    }

    /// Vectors in original id order.
    pub fn original_data(&self) -> VectorDataset {
        match &self.permutation {
            Some(p) => self.data.gather(p.forward()),
            None => self.data.clone(),
        }
    }

    /// Searches one padded query; result ids are original ids.
    pub fn search(
        &self,
        query: &[f32],
        params: &SearchParams,
        scoring: Scoring,
        scratch: &mut SearchScratch,
    ) -> Result<SearchOutput, IndexError> {
        let mut out = match scoring {
            Scoring::Exact => search_with_scratch(&self.graph, &self.data, query, params, scratch)?,
            Scoring::Codes { rerank } => {
                let codes = self.codes.as_ref().ok_or(IndexError::NoCodes)?;
                adc_search(&self.graph, codes, &self.data, query, params, rerank, scratch)?
            }
        };
        if let Some(p) = &self.permutation {
            for id in &mut out.ids {
                *id = p.inverse()[*id as usize];
            }
        }
        Ok(out)
    }

    /// Searches every query on `workers` threads.
    pub fn batch_search(
        &self,
        queries: &QuerySet,
        params: &SearchParams,
        scoring: Scoring,
        workers: usize,
    ) -> Result<BatchOutput, IndexError> {
        params.validate()?;
        if scoring != Scoring::Exact && self.codes.is_none() {
            return Err(IndexError::NoCodes);
        }
        if queries.padded_dim() != self.data.padded_dim() && !queries.is_empty() {
            return Err(SearchError::UnpaddedQuery { expected: self.data.padded_dim(), found: queries.padded_dim() }.into());
        }
        let out = dispatch(queries.len(), workers, |i, scratch| {
            self.search(queries.query(i), params, scoring, scratch).map_err(|e| match e {
                IndexError::Search(s) => s,
                other => SearchError::InvalidParams(other.to_string()),
            })
        })?;
        Ok(out)
    }
}

/// Lifecycle of a [`VectorIndex`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lifecycle {
    Configured,
    Built,
    Ready,
}

impl fmt::Display for Lifecycle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Configured => "configured",
            Self::Built => "built",
            Self::Ready => "ready",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexConfig {
    pub dim: usize,
    pub metric: Metric,
    pub build: BuildParams,
    pub reorder: ReorderKind,
    pub codec: Option<CodecKind>,
}

impl IndexConfig {
    pub fn new(dim: usize, metric: Metric) -> Self {
        Self { dim, metric, build: BuildParams::default(), reorder: ReorderKind::Mst, codec: None }
    }
}

/// Configure, add vectors, build, then search.
#[derive(Debug)]
pub struct VectorIndex {
    config: IndexConfig,
    pending: Vec<f32>,
    index: Option<Index>,
    summary: Option<BuildSummary>,
    state: Lifecycle,
}

impl VectorIndex {
    pub fn new(config: IndexConfig) -> Self {
        Self { config, pending: Vec::new(), index: None, summary: None, state: Lifecycle::Configured }
    }

    /// Wraps an already built index, e.g. one loaded from disk.
    pub fn from_index(config: IndexConfig, index: Index) -> Self {
        Self { config, pending: Vec::new(), index: Some(index), summary: None, state: Lifecycle::Built }
    }

    pub fn state(&self) -> Lifecycle {
        self.state
    }

    pub fn config(&self) -> &IndexConfig {
        &self.config
    }

    /// Appends `n` vectors given as `n * dim` row-major scalars.
    pub fn add(&mut self, n: usize, x: &[f32]) -> Result<(), IndexError> {
        if self.state != Lifecycle::Configured {
            return Err(IndexError::WrongState { op: "add", state: self.state });
        }
        if x.len() != n * self.config.dim {
            return Err(DataError::RaggedBuffer { len: x.len(), dim: self.config.dim }.into());
        }
        self.pending.extend_from_slice(x);
        Ok(())
    }

    pub fn build(&mut self) -> Result<&BuildSummary, IndexError> {
        if self.state != Lifecycle::Configured {
            return Err(IndexError::WrongState { op: "build", state: self.state });
        }
        let raw = RawVectors::new(self.config.dim, std::mem::take(&mut self.pending))?;
        let data = VectorDataset::build(&raw, self.config.metric)?;
        let (index, summary) = Index::build(data, &self.config.build, self.config.reorder, self.config.codec)?;
        self.index = Some(index);
        self.state = Lifecycle::Built;
        Ok(self.summary.insert(summary))
    }

    /// Checks every invariant and unlocks searching.
    pub fn ready(&mut self) -> Result<(), IndexError> {
        match (&self.index, self.state) {
            (Some(index), Lifecycle::Built | Lifecycle::Ready) => {
                index.validate()?;
                self.state = Lifecycle::Ready;
                Ok(())
            }
            _ => Err(IndexError::WrongState { op: "ready", state: self.state }),
        }
    }

    pub fn index(&self) -> Option<&Index> {
        self.index.as_ref()
    }

    pub fn summary(&self) -> Option<&BuildSummary> {
        self.summary.as_ref()
    }

    /// Top-`k` for `nq` raw queries (`nq * dim` scalars) on `nt` threads.
    pub fn search(&self, nq: usize, q: &[f32], k: usize, nt: usize, ef: usize) -> Result<BatchOutput, IndexError> {
        if self.state != Lifecycle::Ready {
            return Err(IndexError::WrongState { op: "search", state: self.state });
        }
        let index = self.index.as_ref().expect("ready implies built");
        if q.len() != nq * self.config.dim {
            return Err(DataError::RaggedBuffer { len: q.len(), dim: self.config.dim }.into());
        }
        let raw = RawVectors::new(self.config.dim, q.to_vec())?;
        let queries = QuerySet::build(&raw, index.data())?;
        let params = SearchParams::new(k, ef.max(k));
        index.batch_search(&queries, &params, Scoring::Exact, nt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::random_points;

    fn small_config() -> IndexConfig {
        let mut c = IndexConfig::new(8, Metric::SquaredL2);
        c.build = BuildParams { max_degree: 8, knn: 8, build_ef: 32, ..BuildParams::default() };
        c
    }

    #[test]
    fn lifecycle_order_is_enforced() {
        let pts: Vec<f32> = random_points(300, 8, 1).concat();
        let mut h = VectorIndex::new(small_config());
        assert!(matches!(h.search(1, &pts[..8], 1, 1, 10), Err(IndexError::WrongState { op: "search", .. })));
        h.add(300, &pts).unwrap();
        assert!(h.ready().is_err());
        h.build().unwrap();
        assert_eq!(h.state(), Lifecycle::Built);
        assert!(matches!(h.add(1, &pts[..8]), Err(IndexError::WrongState { op: "add", .. })));
        assert!(h.search(1, &pts[..8], 1, 1, 10).is_err());
        h.ready().unwrap();
        let out = h.search(2, &pts[8..24], 1, 2, 20).unwrap();
        assert_eq!(out.id_matrix(), vec![vec![1], vec![2]]);
    }

    #[test]
    fn ragged_add_is_rejected() {
        let mut h = VectorIndex::new(small_config());
        assert!(h.add(2, &[0.0; 15]).is_err());
    }

    #[test]
    fn reordered_index_reports_original_ids() {
        let raw = RawVectors::from_rows(&random_points(400, 8, 3)).unwrap();
        let data = VectorDataset::build(&raw, Metric::SquaredL2).unwrap();
        let params = small_config().build;
        let (plain, _) = Index::build(data.clone(), &params, ReorderKind::None, None).unwrap();
        let (mst, summary) = Index::build(data.clone(), &params, ReorderKind::Mst, None).unwrap();
        assert!(summary.bandwidth_after <= summary.bandwidth_before);
        assert_eq!(mst.original_data(), data);
        let p = SearchParams::new(5, 40);
        let mut s = SearchScratch::default();
        for i in 0..20 {
            let q = data.vector(i * 7);
            let a = plain.search(q, &p, Scoring::Exact, &mut s).unwrap();
            let b = mst.search(q, &p, Scoring::Exact, &mut s).unwrap();
            assert_eq!(a.ids, b.ids);
            assert_eq!(a.distances, b.distances);
        }
    }

    #[test]
    fn reorder_kind_parsing() {
        for k in [ReorderKind::None, ReorderKind::Mst, ReorderKind::Random, ReorderKind::Bfs] {
            assert_eq!(k.to_string().parse::<ReorderKind>(), Ok(k));
        }
        assert!("gorder".parse::<ReorderKind>().is_err());
    }
}
