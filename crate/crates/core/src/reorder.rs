//! Locality-driven node renumbering.
//!
//! The graph is reduced to a minimum spanning tree rooted at the entry node,
//! subtree sizes are computed with an explicit-stack DFS, and nodes are then
//! emitted from a max-priority queue keyed by subtree size, children becoming
//! eligible once their parent has been emitted. Large subtrees end up in
//! contiguous memory.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, VecDeque};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::VectorDataset;
use crate::distance::distance;
use crate::graph::{ProximityGraph, SENTINEL};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReorderError {
    #[error("graph is disconnected: {components} components")]
    Disconnected { components: usize },
    #[error("not a permutation of 0..{n}: {detail}")]
    NotAPermutation { n: usize, detail: String },
    #[error("permutation covers {perm} nodes but the graph has {graph}")]
    SizeMismatch { perm: usize, graph: usize },
    #[error("invalid tree: {0}")]
    InvalidTree(String),
}

/// Bijection between node ids and memory positions.
///
/// `forward[old] = new`, `inverse[new] = old`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    forward: Vec<u32>,
    inverse: Vec<u32>,
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        let ids: Vec<u32> = (0..n as u32).collect();
        Self { forward: ids.clone(), inverse: ids }
    }

    /// From a visit order `S`: node `S[j]` moves to position `j`.
    pub fn from_order(order: Vec<u32>) -> Result<Self, ReorderError> {
        let n = order.len();
        let mut forward = vec![SENTINEL; n];
        for (pos, &old) in order.iter().enumerate() {
            let slot = forward.get_mut(old as usize).ok_or_else(|| ReorderError::NotAPermutation {
                n,
                detail: format!("id {old} out of range"),
            })?;
            if *slot != SENTINEL {
                return Err(ReorderError::NotAPermutation { n, detail: format!("id {old} appears twice") });
            }
            *slot = pos as u32;
        }
        Ok(Self { forward, inverse: order })
    }

    /// From the `forward` map (old id -> new position).
    pub fn from_forward(forward: Vec<u32>) -> Result<Self, ReorderError> {
        let inverse = Self::from_order(forward)?.forward;
        Self::from_order(inverse)
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn forward(&self) -> &[u32] {
        &self.forward
    }

    pub fn inverse(&self) -> &[u32] {
        &self.inverse
    }

    pub fn is_identity(&self) -> bool {
        self.forward.iter().enumerate().all(|(i, &p)| i as u32 == p)
    }

    /// The permutation that undoes this one.
    pub fn inverted(&self) -> Self {
        Self { forward: self.inverse.clone(), inverse: self.forward.clone() }
    }

    /// `self` followed by `then`.
    pub fn then(&self, then: &Permutation) -> Self {
        let forward: Vec<u32> = self.forward.iter().map(|&p| then.forward[p as usize]).collect();
        Self::from_forward(forward).expect("composition of bijections")
    }
}

/// Rooted spanning tree with subtree sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanningTree {
    pub root: u32,
    /// `parent[root] == SENTINEL`.
    pub parent: Vec<u32>,
    pub children: Vec<Vec<u32>>,
    /// Edge weight to the parent (0 for the root).
    pub parent_distance: Vec<f32>,
    /// Subtree sizes.
    pub met: Vec<u32>,
    pub total_weight: f64,
}

impl SpanningTree {
    /// Roots the undirected tree given by `edges` at `root`.
    pub fn from_edges(n: usize, root: u32, edges: &[(u32, u32, f32)]) -> Result<Self, ReorderError> {
        if n == 0 || root as usize >= n {
            return Err(ReorderError::InvalidTree(format!("root {root} out of range for {n} nodes")));
        }
        if edges.len() + 1 != n {
            return Err(ReorderError::InvalidTree(format!("{} edges for {n} nodes", edges.len())));
        }
        let mut adj: Vec<Vec<(u32, f32)>> = vec![Vec::new(); n];
        for &(a, b, w) in edges {
            if a as usize >= n || b as usize >= n || a == b {
                return Err(ReorderError::InvalidTree(format!("bad edge ({a}, {b})")));
            }
            adj[a as usize].push((b, w));
            adj[b as usize].push((a, w));
        }
        let mut parent = vec![SENTINEL; n];
        let mut parent_distance = vec![0.0f32; n];
        let mut children: Vec<Vec<u32>> = vec![Vec::new(); n];
        let mut seen = vec![false; n];
        seen[root as usize] = true;
        let mut queue = VecDeque::from([root]);
        let mut reached = 1;
        while let Some(u) = queue.pop_front() {
            let mut next: Vec<(u32, f32)> = adj[u as usize].iter().copied().filter(|&(v, _)| !seen[v as usize]).collect();
            next.sort_by_key(|&(v, _)| v);
            for (v, w) in next {
                seen[v as usize] = true;
                reached += 1;
                parent[v as usize] = u;
                parent_distance[v as usize] = w;
                children[u as usize].push(v);
                queue.push_back(v);
            }
        }
        if reached != n {
            return Err(ReorderError::Disconnected { components: n - reached + 1 });
        }
        let met = subtree_sizes(root, &children);
        let total_weight = edges.iter().map(|e| f64::from(e.2)).sum();
        Ok(Self { root, parent, children, parent_distance, met, total_weight })
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }
}

/// Subtree sizes by iterative two-phase DFS: a node is pushed unprocessed,
/// re-pushed as processed above its children, and summed when popped again.
pub fn subtree_sizes(root: u32, children: &[Vec<u32>]) -> Vec<u32> {
    let mut met = vec![1u32; children.len()];
    let mut stack = vec![(root, false)];
    while let Some((u, processed)) = stack.pop() {
        if processed {
            for &v in &children[u as usize] {
                met[u as usize] += met[v as usize];
            }
        } else {
            stack.push((u, true));
            for &v in children[u as usize].iter().rev() {
                stack.push((v, false));
            }
        }
    }
    met
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        parent[x as usize] = parent[parent[x as usize] as usize];
        x = parent[x as usize];
    }
    x
}

/// Undirected edge list of the graph, weighted by metric distance, sorted by
/// `(weight, lower id, higher id)`.
pub fn weighted_edges(graph: &ProximityGraph, data: &VectorDataset) -> Vec<(u32, u32, f32)> {
    let mut edges: Vec<(u32, u32, f32)> = graph
        .edges()
        .map(|(u, v)| {
            let (a, b) = if u < v { (u, v) } else { (v, u) };
            (a, b, distance(data.vector(a as usize), data.vector(b as usize), data.metric()))
        })
        .collect();
    edges.sort_by(|x, y| x.2.total_cmp(&y.2).then(x.0.cmp(&y.0)).then(x.1.cmp(&y.1)));
    edges.dedup_by(|x, y| x.0 == y.0 && x.1 == y.1);
    edges
}

/// Minimum spanning tree of the undirected graph (Kruskal), rooted at the entry.
pub fn build_mst(graph: &ProximityGraph, data: &VectorDataset) -> Result<SpanningTree, ReorderError> {
    let n = graph.len();
    let mut uf: Vec<u32> = (0..n as u32).collect();
    let mut tree = Vec::with_capacity(n.saturating_sub(1));
    for (a, b, w) in weighted_edges(graph, data) {
        let (ra, rb) = (find(&mut uf, a), find(&mut uf, b));
        if ra != rb {
            uf[ra.max(rb) as usize] = ra.min(rb);
            tree.push((a, b, w));
            if tree.len() + 1 == n {
                break;
            }
        }
    }
    if tree.len() + 1 != n {
        return Err(ReorderError::Disconnected { components: n - tree.len() });
    }
    SpanningTree::from_edges(n, graph.entry(), &tree)
}

#[derive(PartialEq)]
struct Pending {
    met: u32,
    parent_distance: f32,
    id: u32,
}

impl Eq for Pending {}

impl Ord for Pending {
    fn cmp(&self, other: &Self) -> Ordering {
        // Max-heap: larger subtree first, then nearer to parent, then lower id.
        self.met
            .cmp(&other.met)
            .then_with(|| other.parent_distance.total_cmp(&self.parent_distance))
            .then_with(|| Reverse(self.id).cmp(&Reverse(other.id)))
    }
}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Node sequence `S` produced by the subtree-size priority traversal.
pub fn priority_order(tree: &SpanningTree) -> Vec<u32> {
    let mut order = Vec::with_capacity(tree.len());
    let mut heap = BinaryHeap::new();
    heap.push(Pending { met: tree.met[tree.root as usize], parent_distance: 0.0, id: tree.root });
    while let Some(Pending { id, .. }) = heap.pop() {
        order.push(id);
        for &c in &tree.children[id as usize] {
            heap.push(Pending {
                met: tree.met[c as usize],
                parent_distance: tree.parent_distance[c as usize],
                id: c,
            });
        }
    }
    order
}

/// MST-based locality permutation of `graph`.
pub fn reorder(graph: &ProximityGraph, data: &VectorDataset) -> Result<Permutation, ReorderError> {
    let tree = build_mst(graph, data)?;
    Permutation::from_order(priority_order(&tree))
}

/// `max |pi(u) - pi(v)|` over real edges.
pub fn bandwidth(graph: &ProximityGraph, perm: &Permutation) -> usize {
    let f = perm.forward();
    graph
        .edges()
        .map(|(u, v)| f[u as usize].abs_diff(f[v as usize]) as usize)
        .max()
        .unwrap_or(0)
}

/// Mean `|pi(u) - pi(v)|` over real edges.
pub fn mean_edge_span(graph: &ProximityGraph, perm: &Permutation) -> f64 {
    let f = perm.forward();
    let (sum, count) = graph
        .edges()
        .fold((0u64, 0u64), |(s, c), (u, v)| (s + u64::from(f[u as usize].abs_diff(f[v as usize])), c + 1));
    if count == 0 {
        0.0
    } else {
        sum as f64 / count as f64
    }
}

/// Physically renumbers vectors and adjacency. Neighbor order within each row is kept.
pub fn apply_permutation(
    graph: &ProximityGraph,
    data: &VectorDataset,
    perm: &Permutation,
) -> Result<(ProximityGraph, VectorDataset), ReorderError> {
    if perm.len() != graph.len() || perm.len() != data.len() {
        return Err(ReorderError::SizeMismatch { perm: perm.len(), graph: graph.len() });
    }
    let f = perm.forward();
    let mut out = ProximityGraph::empty(graph.len(), graph.degree(), f[graph.entry() as usize], graph.metric());
    let mut row = Vec::with_capacity(graph.degree());
    for old in 0..graph.len() as u32 {
        row.clear();
        row.extend(graph.neighbors(old).iter().map(|&u| f[u as usize]));
        out.set_row(f[old as usize], &row);
    }
    Ok((out, data.gather(perm.inverse())))
}

/// Uniformly random permutation (baseline).
pub fn random_permutation(n: usize, seed: u64) -> Permutation {
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Permutation::from_order(order).expect("shuffle is a bijection")
}

/// Cuthill-McKee style breadth-first order from the entry (baseline): neighbors
/// are visited in ascending undirected degree, then id.
pub fn bfs_permutation(graph: &ProximityGraph) -> Permutation {
    let n = graph.len();
    let mut undirected: Vec<Vec<u32>> = vec![Vec::new(); n];
    for (u, v) in graph.edges() {
        undirected[u as usize].push(v);
        undirected[v as usize].push(u);
    }
    for list in &mut undirected {
        list.sort_unstable();
        list.dedup();
    }
    let degree: Vec<usize> = undirected.iter().map(Vec::len).collect();
    let mut seen = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let starts = std::iter::once(graph.entry()).chain(0..n as u32);
    for start in starts {
        if seen[start as usize] {
            continue;
        }
        seen[start as usize] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            order.push(u);
            let mut next: Vec<u32> = undirected[u as usize].iter().copied().filter(|&v| !seen[v as usize]).collect();
            next.sort_by_key(|&v| (degree[v as usize], v));
            for v in next {
                seen[v as usize] = true;
                queue.push_back(v);
            }
        }
    }
    Permutation::from_order(order).expect("bfs visits every node once")
}
