//! Sparse graphs, symmetric normalization and K-hop linear propagation.

mod sbm;

use std::collections::BTreeSet;

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

pub use sbm::{generate_sbm, SbmSpec};

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    n: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl Csr {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `(column, value)` pairs of one row.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.offsets[i]..self.offsets[i + 1];
        self.indices[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut d = Array2::zeros((self.n, self.n));
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                d[[i, j]] += v;
            }
        }
        d
    }

    /// `self · x`.
    pub fn mul_dense(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.nrows() != self.n {
            return Err(Error::Shape {
                op: "propagate",
                left: vec![self.n, self.n],
                right: x.shape().to_vec(),
            });
        }
        let mut out = Array2::zeros(x.dim());
        for (i, mut out_row) in out.axis_iter_mut(Axis(0)).enumerate() {
            for (j, v) in self.row(i) {
                out_row.scaled_add(v, &x.row(j));
            }
        }
        Ok(out)
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).map(|(_, v)| v).sum()).collect()
    }
}

/// An undirected, unweighted node-attributed graph.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGraph {
    adjacency: Csr,
    features: Array2<f64>,
    labels: Vec<usize>,
}

impl SparseGraph {
    /// Builds a graph from an edge list. Edges are symmetrized, duplicates
    /// collapse and self loops are dropped (normalization adds its own).
    pub fn from_edges(
        features: Array2<f64>,
        labels: Vec<usize>,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let n = features.nrows();
        if labels.len() != n {
            return Err(Error::Shape {
                op: "SparseGraph::from_edges",
                left: features.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(row) = features
            .axis_iter(Axis(0))
            .position(|r| r.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite {
                op: "SparseGraph::from_edges",
                row,
            });
        }
        let mut neighbours: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for (a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::contract(format!(
                    "edge ({a}, {b}) references a node outside 0..{n}"
                )));
            }
            if a != b {
                neighbours[a].insert(b);
                neighbours[b].insert(a);
            }
        }
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        let mut indices = Vec::new();
        for set in &neighbours {
            indices.extend(set.iter().copied());
            offsets.push(indices.len());
        }
        let values = vec![1.0; indices.len()];
        Ok(Self {
            adjacency: Csr {
                n,
                offsets,
                indices,
                values,
            },
            features,
            labels,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.n
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.adjacency.nnz() / 2
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn adjacency(&self) -> &Csr {
        &self.adjacency
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn neighbours(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.adjacency.row(i).map(|(j, _)| j)
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbours(i).any(|k| k == j)
    }

    /// Divides each feature row by its L1 norm (rows summing to zero are kept).
    pub fn row_normalize_features(&mut self) {
        for mut row in self.features.axis_iter_mut(Axis(0)) {
            let total: f64 = row.iter().map(|v| v.abs()).sum();
            if total > 0.0 {
                row /= total;
            }
        }
    }

    /// The subgraph induced by `nodes`, keeping exactly the edges with both
    /// endpoints inside. New node `i` is `nodes[i]`.
    pub fn induced_subgraph(&self, nodes: &[usize]) -> Result<Subgraph> {
        let n = self.num_nodes();
        let mut old_to_new = vec![usize::MAX; n];
        for (new, &old) in nodes.iter().enumerate() {
            if old >= n {
                return Err(Error::contract(format!("node {old} is outside 0..{n}")));
            }
            if old_to_new[old] != usize::MAX {
                return Err(Error::contract(format!("node {old} listed twice")));
            }
            old_to_new[old] = new;
        }
        let features = self.features.select(Axis(0), nodes);
        let labels = nodes.iter().map(|&i| self.labels[i]).collect();
        let mut edges = Vec::new();
        for (new, &old) in nodes.iter().enumerate() {
            for j in self.neighbours(old) {
                let mapped = old_to_new[j];
                if mapped != usize::MAX && new < mapped {
                    edges.push((new, mapped));
                }
            }
        }
        let graph = SparseGraph::from_edges(features, labels, edges)?;
        Ok(Subgraph {
            graph,
            new_to_old: nodes.to_vec(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Subgraph {
    pub graph: SparseGraph,
    /// `new_to_old[i]` is the parent-graph index of subgraph node `i`.
    pub new_to_old: Vec<usize>,
}

impl Subgraph {
    pub fn old_to_new(&self, old: usize) -> Option<usize> {
        self.new_to_old.iter().position(|&o| o == old)
    }
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` where `D̃` counts the added self loop.
pub fn normalize_adjacency(g: &SparseGraph) -> Csr {
    let a = g.adjacency();
    let n = a.n;
    let degree: Vec<f64> = (0..n).map(|i| (a.offsets[i + 1] - a.offsets[i]) as f64 + 1.0).collect();
    let weight = |i: usize, j: usize| 1.0 / (degree[i] * degree[j]).sqrt();
    let mut offsets = Vec::with_capacity(n + 1);
    offsets.push(0);
    let mut indices = Vec::with_capacity(a.nnz() + n);
    let mut values = Vec::with_capacity(a.nnz() + n);
    for i in 0..n {
        let mut diag_done = false;
        for (j, _) in a.row(i) {
            if !diag_done && j > i {
                indices.push(i);
                values.push(weight(i, i));
                diag_done = true;
            }
            indices.push(j);
            values.push(weight(i, j));
        }
        if !diag_done {
            indices.push(i);
            values.push(weight(i, i));
        }
        offsets.push(indices.len());
    }
    Csr {
        n,
        offsets,
        indices,
        values,
    }
}

/// `X' = S^K X`, the fixed output of the linear propagation stage.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagatedFeatures {
    matrix: Array2<f64>,
    hops: usize,
}

impl PropagatedFeatures {
    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn hops(&self) -> usize {
        self.hops
    }

    pub fn rows(&self, idx: &[usize]) -> Array2<f64> {
        self.matrix.select(Axis(0), idx)
    }

    pub fn into_matrix(self) -> Array2<f64> {
        self.matrix
    }
}

/// Applies `s` to `x` `hops` times without forming `S^K`.
pub fn propagate(s: &Csr, x: &Array2<f64>, hops: usize) -> Result<PropagatedFeatures> {
    let mut m = x.clone();
    if x.nrows() != s.n {
        return Err(Error::Shape {
            op: "propagate",
            left: vec![s.n, s.n],
            right: x.shape().to_vec(),
        });
    }
    for _ in 0..hops {
        m = s.mul_dense(&m)?;
    }
    Ok(PropagatedFeatures { matrix: m, hops })
}

/// Normalizes `g` and propagates its own features.
pub fn propagate_graph(g: &SparseGraph, hops: usize) -> Result<PropagatedFeatures> {
    propagate(&normalize_adjacency(g), g.features(), hops)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn edge_pair() -> SparseGraph {
        SparseGraph::from_edges(Array2::eye(2), vec![0, 1], [(0, 1)]).unwrap()
    }

    #[test]
    fn single_node_normalizes_to_one() {
        let g = SparseGraph::from_edges(array![[2.0]], vec![0], []).unwrap();
        assert_eq!(normalize_adjacency(&g).to_dense(), array![[1.0]]);
    }

    #[test]
    fn edge_pair_is_all_halves() {
        let s = normalize_adjacency(&edge_pair()).to_dense();
        assert_eq!(s, array![[0.5, 0.5], [0.5, 0.5]]);
    }

    #[test]
    fn star_center_diagonal() {
        let g = SparseGraph::from_edges(Array2::zeros((4, 1)), vec![0; 4], [(0, 1), (0, 2), (0, 3)]).unwrap();
        let s = normalize_adjacency(&g);
        assert!((s.get(0, 0) - 0.25).abs() < 1e-15);
        // leaf: degree 2 with the self loop, centre 4 -> 1/sqrt(8)
        assert!((s.get(1, 0) - 1.0 / 8f64.sqrt()).abs() < 1e-15);
        assert!((s.get(1, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn propagate_examples() {
        let g = edge_pair();
        let s = normalize_adjacency(&g);
        let x = array![[1.5, -2.0], [0.25, 9.0]];
        assert_eq!(propagate(&s, &x, 0).unwrap().matrix(), &x);
        let one = propagate(&s, &Array2::eye(2), 1).unwrap();
        assert_eq!(one.matrix(), &array![[0.5, 0.5], [0.5, 0.5]]);
        let two = propagate(&s, &x, 2).unwrap();
        let twice = propagate(&s, propagate(&s, &x, 1).unwrap().matrix(), 1).unwrap();
        assert_eq!(two.matrix(), twice.matrix());
    }

    #[test]
    fn propagate_dimension_mismatch() {
        let s = normalize_adjacency(&edge_pair());
        assert!(propagate(&s, &Array2::zeros((3, 2)), 1).is_err());
    }

    #[test]
    fn directed_input_is_symmetrized() {
        let g = SparseGraph::from_edges(Array2::zeros((3, 1)), vec![0; 3], [(0, 1), (2, 1), (1, 0)]).unwrap();
        assert!(g.has_edge(1, 0) && g.has_edge(1, 2) && g.has_edge(2, 1));
        assert_eq!(g.num_edges(), 2);
    }

    #[test]
    fn induced_subgraph_examples() {
        let tri =
            SparseGraph::from_edges(array![[1.0], [2.0], [3.0]], vec![0, 1, 2], [(0, 1), (1, 2), (0, 2)]).unwrap();
        let whole = tri.induced_subgraph(&[0, 1, 2]).unwrap();
        assert_eq!(whole.graph, tri);

        let pair = tri.induced_subgraph(&[0, 1]).unwrap();
        assert_eq!(pair.graph.num_edges(), 1);
        assert_eq!(pair.graph.features(), &array![[1.0], [2.0]]);

        let iso = SparseGraph::from_edges(Array2::zeros((3, 1)), vec![0; 3], [(0, 1)]).unwrap();
        let single = iso.induced_subgraph(&[2]).unwrap();
        assert_eq!(single.graph.num_nodes(), 1);
        assert_eq!(single.graph.num_edges(), 0);

        assert!(tri.induced_subgraph(&[0, 7]).is_err());
    }
}
