//! Simple undirected graphs and the structural quantities computed on them.
//!
//! A [`Graph`] is the unit for both task data and watermark carriers. Edges
//! are stored once as `(u, v)` with `u < v`, sorted, so two graphs built from
//! the same edge set compare equal regardless of insertion order.

mod normalize;
mod spectrum;
mod stats;
pub(crate) mod wl;

pub use normalize::{fit_normalization, normalized_lambda2, percentile, NormalizationConstants};
pub use spectrum::{spectrum, symmetric_eigenvalues, SpectrumResult, DEFAULT_DIAG_EPS};
pub use stats::{
    degree_assortativity, graph_statistics, local_clustering, motif_counts, MotifCounts,
    STATISTICS_DIM,
};
pub use wl::{wl_hash, wl_hash_default, WlDigest};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("graph must have at least one node")]
    Empty,
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("edge ({0}, {1}) references a node outside [0, {2})")]
    NodeOutOfRange(usize, usize, usize),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("feature block has {got} rows, expected {expected}")]
    FeatureRows { got: usize, expected: usize },
    #[error("feature rows have inconsistent widths")]
    RaggedFeatures,
    #[error("eigensolver did not converge within {0} iterations")]
    NumericalFailure(usize),
    #[error("normalization scale is degenerate (lambda_scale <= lambda_min)")]
    DegenerateScale,
    #[error("at least {needed} graphs are required, got {got}")]
    InsufficientData { needed: usize, got: usize },
}

/// Simple undirected graph with optional per-node real features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GraphRepr", into = "GraphRepr")]
pub struct Graph {
    node_count: usize,
    edges: Vec<(usize, usize)>,
    features: Option<Vec<Vec<f64>>>,
    adjacency: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct GraphRepr {
    n: usize,
    edges: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<Vec<Vec<f64>>>,
}

impl TryFrom<GraphRepr> for Graph {
    type Error = GraphError;

    fn try_from(r: GraphRepr) -> Result<Self, Self::Error> {
        let g = Graph::new(r.n, r.edges)?;
        match r.features {
            Some(f) => g.with_features(f),
            None => Ok(g),
        }
    }
}

impl From<Graph> for GraphRepr {
    fn from(g: Graph) -> Self {
        GraphRepr { n: g.node_count, edges: g.edges, features: g.features }
    }
}

impl Graph {
    /// Builds a graph, rejecting self-loops, duplicates (in either
    /// orientation) and out-of-range endpoints.
    pub fn new(node_count: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self, GraphError> {
        if node_count == 0 {
            return Err(GraphError::Empty);
        }
        let mut norm: Vec<(usize, usize)> = Vec::new();
        for (u, v) in edges {
            if u >= node_count || v >= node_count {
                return Err(GraphError::NodeOutOfRange(u, v, node_count));
            }
            if u == v {
                return Err(GraphError::SelfLoop(u));
            }
            norm.push((u.min(v), u.max(v)));
        }
        norm.sort_unstable();
        if let Some(w) = norm.windows(2).find(|w| w[0] == w[1]) {
            return Err(GraphError::DuplicateEdge(w[0].0, w[0].1));
        }
        Ok(Self::from_sorted_unchecked(node_count, norm))
    }

    /// Like [`Graph::new`] but silently drops duplicate edges. Self-loops and
    /// out-of-range endpoints are still errors.
    pub fn new_dedup(node_count: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self, GraphError> {
        let mut norm: Vec<(usize, usize)> = edges.into_iter().map(|(u, v)| (u.min(v), u.max(v))).collect();
        norm.sort_unstable();
        norm.dedup();
        Self::new(node_count, norm)
    }

    /// Graph on `n` nodes with no edges.
    pub fn empty(n: usize) -> Result<Self, GraphError> {
        Self::new(n, std::iter::empty())
    }

    pub fn complete(n: usize) -> Result<Self, GraphError> {
        Self::new(n, (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v))))
    }

    pub fn path(n: usize) -> Result<Self, GraphError> {
        Self::new(n, (1..n).map(|v| (v - 1, v)))
    }

    pub fn cycle(n: usize) -> Result<Self, GraphError> {
        let edges: Vec<_> = if n < 3 { (1..n).map(|v| (v - 1, v)).collect() } else { (0..n).map(|v| (v, (v + 1) % n)).collect() };
        Self::new(n, edges)
    }

    pub(crate) fn from_sorted_unchecked(node_count: usize, edges: Vec<(usize, usize)>) -> Self {
        let mut adjacency = vec![Vec::new(); node_count];
        for &(u, v) in &edges {
            adjacency[u].push(v);
            adjacency[v].push(u);
        }
        for nb in &mut adjacency {
            nb.sort_unstable();
        }
        Self { node_count, edges, features: None, adjacency }
    }

    /// Attaches node features (one row per node, equal widths).
    pub fn with_features(mut self, features: Vec<Vec<f64>>) -> Result<Self, GraphError> {
        if features.len() != self.node_count {
            return Err(GraphError::FeatureRows { got: features.len(), expected: self.node_count });
        }
        let width = features[0].len();
        if features.iter().any(|r| r.len() != width) {
            return Err(GraphError::RaggedFeatures);
        }
        self.features = Some(features);
        Ok(self)
    }

    pub fn without_features(mut self) -> Self {
        self.features = None;
        self
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Sorted `(u, v)` pairs with `u < v`.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> Option<&[Vec<f64>]> {
        self.features.as_deref()
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adjacency[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adjacency[v].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.adjacency.iter().map(Vec::len).collect()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        u != v && self.adjacency[u].binary_search(&v).is_ok()
    }

    /// Relabels nodes so that old node `v` becomes `perm[v]`.
    pub fn permute(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.node_count, "permutation length");
        let edges: Vec<_> = self.edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect();
        let mut g = Self::new(self.node_count, edges).expect("permutation of a valid graph is valid");
        if let Some(f) = &self.features {
            let mut rows = vec![Vec::new(); self.node_count];
            for (old, row) in f.iter().enumerate() {
                rows[perm[old]] = row.clone();
            }
            g.features = Some(rows);
        }
        g
    }

    /// Disjoint union; nodes of `other` are shifted by `self.node_count()`.
    pub fn disjoint_union(&self, other: &Graph) -> Self {
        let off = self.node_count;
        let edges = self.edges.iter().copied().chain(other.edges.iter().map(|&(u, v)| (u + off, v + off)));
        Self::new(self.node_count + other.node_count, edges).expect("union of valid graphs is valid")
    }

    /// Number of connected components.
    pub fn component_count(&self) -> usize {
        let mut seen = vec![false; self.node_count];
        let mut count = 0;
        let mut stack = Vec::new();
        for s in 0..self.node_count {
            if seen[s] {
                continue;
            }
            count += 1;
            seen[s] = true;
            stack.push(s);
            while let Some(u) = stack.pop() {
                for &w in &self.adjacency[u] {
                    if !seen[w] {
                        seen[w] = true;
                        stack.push(w);
                    }
                }
            }
        }
        count
    }
}

/// Dense row-major square matrix used for Laplacians.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; n * n] }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|i| self.row(i).to_vec()).collect()
    }
}

/// Combinatorial Laplacian `D - A`.
pub fn laplacian(g: &Graph) -> DenseMatrix {
    let n = g.node_count();
    let mut l = DenseMatrix::zeros(n);
    for v in 0..n {
        l.set(v, v, g.degree(v) as f64);
    }
    for &(u, v) in g.edges() {
        l.set(u, v, -1.0);
        l.set(v, u, -1.0);
    }
    l
}
