//! Undirected graphs with node features: construction, symmetric
//! normalization, synthetic benchmarks, structural noise, link splits, and
//! the random augmentations used for the second view.
//!
//! The adjacency is stored as CSR over unweighted undirected edges. No
//! self-loops are stored; loops enter only through [`sym_normalize`]. Every
//! randomized operation takes an explicit seed and is reproducible from it.

use std::collections::HashSet;
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::sparse::CsrMatrix;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("node index {index} out of range for {num_nodes} nodes")]
    IndexOutOfRange { index: usize, num_nodes: usize },
    #[error("feature matrix has {got} rows, expected {expected}")]
    FeatureRowMismatch { expected: usize, got: usize },
    #[error("label vector has {got} entries, expected {expected}")]
    LabelLenMismatch { expected: usize, got: usize },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("{name} = {value} is not a valid probability")]
    InvalidProbability { name: &'static str, value: f64 },
    #[error("stochastic block model needs at least one non-empty block")]
    EmptyBlock,
    #[error("link split ratios {0:?} do not sum to 1")]
    RatioSum([f64; 3]),
    #[error("link split leaves the {part} partition empty")]
    SplitEmpty { part: &'static str },
    #[error("graph too dense: {needed} negative pairs requested, {available} non-edges exist")]
    TooDense { needed: usize, available: usize },
}

/// Undirected graph with dense node features and optional labels.
#[derive(Debug, Clone)]
pub struct Graph {
    num_nodes: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    features: Arc<Array2<f64>>,
    labels: Option<Vec<usize>>,
    num_classes: Option<usize>,
}

impl Graph {
    /// Builds a graph from an edge list. Edges are symmetrized and
    /// deduplicated; self-loops are not stored.
    pub fn new(
        num_nodes: usize,
        edges: &[(usize, usize)],
        features: Array2<f64>,
        labels: Option<Vec<usize>>,
        num_classes: Option<usize>,
    ) -> Result<Graph, GraphError> {
        if features.nrows() != num_nodes {
            return Err(GraphError::FeatureRowMismatch { expected: num_nodes, got: features.nrows() });
        }
        let num_classes = match (&labels, num_classes) {
            (Some(l), k) => {
                if l.len() != num_nodes {
                    return Err(GraphError::LabelLenMismatch { expected: num_nodes, got: l.len() });
                }
                let k = k.unwrap_or_else(|| l.iter().max().map_or(0, |m| m + 1));
                for &y in l {
                    if y >= k {
                        return Err(GraphError::LabelOutOfRange { label: y, num_classes: k });
                    }
                }
                Some(k)
            }
            (None, k) => k,
        };
        let mut neighbor_sets: Vec<HashSet<usize>> = vec![HashSet::new(); num_nodes];
        for &(a, b) in edges {
            for &x in &[a, b] {
                if x >= num_nodes {
                    return Err(GraphError::IndexOutOfRange { index: x, num_nodes });
                }
            }
            if a == b {
                continue;
            }
            neighbor_sets[a].insert(b);
            neighbor_sets[b].insert(a);
        }
        let mut indptr = Vec::with_capacity(num_nodes + 1);
        let mut indices = Vec::new();
        indptr.push(0);
        for set in &neighbor_sets {
            let mut row: Vec<usize> = set.iter().copied().collect();
            row.sort_unstable();
            indices.extend_from_slice(&row);
            indptr.push(indices.len());
        }
        Ok(Graph { num_nodes, indptr, indices, features: Arc::new(features), labels, num_classes })
    }

    #[must_use]
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Number of undirected edges.
    #[must_use]
    pub fn num_edges(&self) -> usize {
        self.indices.len() / 2
    }

    #[must_use]
    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    #[must_use]
    pub fn feat_dim(&self) -> usize {
        self.features.ncols()
    }

    #[must_use]
    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    #[must_use]
    pub fn num_classes(&self) -> Option<usize> {
        self.num_classes
    }

    /// Sorted neighbor slice of node `i`.
    #[must_use]
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.indices[self.indptr[i]..self.indptr[i + 1]]
    }

    #[must_use]
    pub fn degree(&self, i: usize) -> usize {
        self.indptr[i + 1] - self.indptr[i]
    }

    #[must_use]
    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors(i).binary_search(&j).is_ok()
    }

    /// Canonical edge list: unordered pairs as (i, j) with i < j, sorted.
    #[must_use]
    pub fn edge_list(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::with_capacity(self.num_edges());
        for i in 0..self.num_nodes {
            for &j in self.neighbors(i) {
                if i < j {
                    edges.push((i, j));
                }
            }
        }
        edges
    }

    /// Fraction of non-zero adjacency entries, 2m / n^2.
    #[must_use]
    pub fn density(&self) -> f64 {
        if self.num_nodes == 0 {
            return 0.0;
        }
        self.indices.len() as f64 / (self.num_nodes * self.num_nodes) as f64
    }

    /// Same nodes, features, and labels over a different edge set.
    pub fn with_edges(&self, edges: &[(usize, usize)]) -> Result<Graph, GraphError> {
        let mut g = self.clone();
        let rebuilt = Graph::new(
            self.num_nodes,
            edges,
            Array2::zeros((self.num_nodes, 0)),
            None,
            None,
        )?;
        g.indptr = rebuilt.indptr;
        g.indices = rebuilt.indices;
        Ok(g)
    }
}

/// Symmetric normalization with self-loops: D^{-1/2} (A + I) D^{-1/2} where
/// D is the degree of A + I. Isolated nodes get a diagonal entry of 1.
#[must_use]
pub fn sym_normalize(g: &Graph) -> CsrMatrix {
    let n = g.num_nodes();
    let deg: Vec<f64> = (0..n).map(|i| g.degree(i) as f64 + 1.0).collect();
    let isqrt: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut indptr = Vec::with_capacity(n + 1);
    let mut indices = Vec::new();
    let mut data = Vec::new();
    indptr.push(0);
    for i in 0..n {
        let mut self_loop_written = false;
        for &j in g.neighbors(i) {
            if !self_loop_written && j > i {
                indices.push(i);
                data.push(isqrt[i] * isqrt[i]);
                self_loop_written = true;
            }
            indices.push(j);
            data.push(isqrt[i] * isqrt[j]);
        }
        if !self_loop_written {
            indices.push(i);
            data.push(isqrt[i] * isqrt[i]);
        }
        indptr.push(indices.len());
    }
    CsrMatrix::from_parts(n, n, indptr, indices, data)
}

/// Adds each absent unordered pair as an edge with probability `h`.
/// Existing edges are never removed.
pub fn inject_noise(g: &Graph, h: f64, seed: u64) -> Result<Graph, GraphError> {
    if !(0.0..=1.0).contains(&h) || !h.is_finite() {
        return Err(GraphError::InvalidProbability { name: "h", value: h });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = g.edge_list();
    for i in 0..g.num_nodes() {
        for j in (i + 1)..g.num_nodes() {
            if !g.has_edge(i, j) && rng.gen_bool(h) {
                edges.push((i, j));
            }
        }
    }
    g.with_edges(&edges)
}

/// Stochastic block model with class-mean features.
///
/// Nodes in the same block connect with probability `p_in`, across blocks
/// with `p_out`. Each block k draws a mean vector from N(0, I); node
/// features are that mean plus `feat_noise` * N(0, I). Labels are block ids.
pub fn sbm_generate(
    blocks: &[usize],
    p_in: f64,
    p_out: f64,
    feat_dim: usize,
    feat_noise: f64,
    seed: u64,
) -> Result<Graph, GraphError> {
    if blocks.is_empty() || blocks.contains(&0) {
        return Err(GraphError::EmptyBlock);
    }
    for (name, p) in [("p_in", p_in), ("p_out", p_out)] {
        if !(0.0..=1.0).contains(&p) || !p.is_finite() {
            return Err(GraphError::InvalidProbability { name, value: p });
        }
    }
    let n: usize = blocks.iter().sum();
    let mut labels = Vec::with_capacity(n);
    for (k, &size) in blocks.iter().enumerate() {
        labels.extend(std::iter::repeat(k).take(size));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let mut means = Array2::<f64>::zeros((blocks.len(), feat_dim));
    for k in 0..blocks.len() {
        for d in 0..feat_dim {
            means[(k, d)] = normal.sample(&mut rng);
        }
    }
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if labels[i] == labels[j] { p_in } else { p_out };
            if rng.gen_bool(p) {
                edges.push((i, j));
            }
        }
    }
    let mut features = Array2::<f64>::zeros((n, feat_dim));
    for v in 0..n {
        for d in 0..feat_dim {
            let eps: f64 = normal.sample(&mut rng);
            features[(v, d)] = means[(labels[v], d)] + feat_noise * eps;
        }
    }
    Graph::new(n, &edges, features, Some(labels), Some(blocks.len()))
}

/// Edge split for link prediction, with sampled negative pairs.
#[derive(Debug, Clone)]
pub struct LinkSplit {
    pub train_edges: Vec<(usize, usize)>,
    pub val_edges: Vec<(usize, usize)>,
    pub test_edges: Vec<(usize, usize)>,
    pub val_negatives: Vec<(usize, usize)>,
    pub test_negatives: Vec<(usize, usize)>,
}

/// Splits edges into train/val/test by the given ratios and samples one
/// negative (absent) pair per held-out positive. The two negative pools are
/// disjoint from each other and from the full edge set.
pub fn split_links(g: &Graph, ratios: (f64, f64, f64), seed: u64) -> Result<LinkSplit, GraphError> {
    let (rt, rv, rs) = ratios;
    if (rt + rv + rs - 1.0).abs() > 1e-9 || rt < 0.0 || rv < 0.0 || rs < 0.0 {
        return Err(GraphError::RatioSum([rt, rv, rs]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = g.edge_list();
    let m = edges.len();
    // Fisher-Yates with the seeded stream.
    for i in (1..m).rev() {
        let j = rng.gen_range(0..=i);
        edges.swap(i, j);
    }
    let n_train = (rt * m as f64).floor() as usize;
    let n_val = (rv * m as f64).floor() as usize;
    if n_train == 0 {
        return Err(GraphError::SplitEmpty { part: "train" });
    }
    if n_train + n_val >= m {
        return Err(GraphError::SplitEmpty { part: "test" });
    }
    let train_edges = edges[..n_train].to_vec();
    let val_edges = edges[n_train..n_train + n_val].to_vec();
    let test_edges = edges[n_train + n_val..].to_vec();

    let n = g.num_nodes();
    let needed = val_edges.len() + test_edges.len();
    let available = n * (n - 1) / 2 - m;
    if needed > available {
        return Err(GraphError::TooDense { needed, available });
    }
    let mut negatives: Vec<(usize, usize)> = Vec::with_capacity(needed);
    let mut chosen: HashSet<(usize, usize)> = HashSet::new();
    if 2 * needed > available {
        // Dense regime: enumerate every non-edge and shuffle.
        let mut pool = Vec::with_capacity(available);
        for i in 0..n {
            for j in (i + 1)..n {
                if !g.has_edge(i, j) {
                    pool.push((i, j));
                }
            }
        }
        for i in (1..pool.len()).rev() {
            let j = rng.gen_range(0..=i);
            pool.swap(i, j);
        }
        negatives.extend_from_slice(&pool[..needed]);
    } else {
        while negatives.len() < needed {
            let a = rng.gen_range(0..n);
            let b = rng.gen_range(0..n);
            if a == b {
                continue;
            }
            let pair = (a.min(b), a.max(b));
            if g.has_edge(pair.0, pair.1) || !chosen.insert(pair) {
                continue;
            }
            negatives.push(pair);
        }
    }
    let val_negatives = negatives[..val_edges.len()].to_vec();
    let test_negatives = negatives[val_edges.len()..].to_vec();
    Ok(LinkSplit { train_edges, val_edges, test_edges, val_negatives, test_negatives })
}

/// Zeroes each feature column independently with probability `p_f`.
#[must_use]
pub fn feature_mask(features: &Array2<f64>, p_f: f64, seed: u64) -> Array2<f64> {
    assert!((0.0..=1.0).contains(&p_f), "p_f out of range: {p_f}");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = features.clone();
    for d in 0..features.ncols() {
        if rng.gen_bool(p_f) {
            out.column_mut(d).fill(0.0);
        }
    }
    out
}

/// Drops each undirected edge independently with probability `p_e`.
#[must_use]
pub fn drop_edges_random(g: &Graph, p_e: f64, seed: u64) -> Graph {
    assert!((0.0..=1.0).contains(&p_e), "p_e out of range: {p_e}");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kept: Vec<(usize, usize)> =
        g.edge_list().into_iter().filter(|_| !rng.gen_bool(p_e)).collect();
    g.with_edges(&kept).expect("kept edges are a subset of valid edges")
}
