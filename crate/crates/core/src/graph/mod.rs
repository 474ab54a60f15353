//! Graphs, splits, injection plans and propagation.

mod candidates;
mod injection;
mod io;
mod propagate;
mod split;

use std::sync::Arc;

use crate::engine::{CsrMatrix, Matrix};
use crate::error::{Error, Result};

pub use candidates::{khop_candidates, CandidateConfig, CandidateSet};
pub use injection::{assemble_injected, Assembled, InjectedGraph, InjectionPlan};
pub use io::{load_dataset, write_dataset, DatasetMeta};
pub use propagate::{normalize_adjacency, Features, GraphVars, Propagator};
pub use split::{split_nodes, Split};

/// Largest node count the attack math accepts.
pub const DESK_SCALE_LIMIT: usize = 25_000;

/// Undirected attributed graph with node labels.
#[derive(Clone, Debug)]
pub struct Graph {
    name: String,
    c: usize,
    edges: Vec<(usize, usize)>,
    features: Matrix,
    labels: Vec<usize>,
    adjacency: Arc<CsrMatrix>,
    feature_op: Arc<CsrMatrix>,
}

impl Graph {
    /// Edges are normalized to `(min, max)` and must be unique with no self-loops.
    pub fn new(
        name: impl Into<String>,
        features: Matrix,
        labels: Vec<usize>,
        c: usize,
        edges: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let n = features.rows();
        if labels.len() != n {
            return Err(Error::Shape(format!("{} labels for {n} nodes", labels.len())));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::invalid(format!("label {y} out of range for {c} classes")));
        }
        let mut norm = Vec::with_capacity(edges.len());
        for (u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::invalid(format!("edge ({u}, {v}) out of range for {n} nodes")));
            }
            if u == v {
                return Err(Error::invalid(format!("self-loop on node {u}")));
            }
            norm.push((u.min(v), u.max(v)));
        }
        norm.sort_unstable();
        if let Some(w) = norm.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::invalid(format!("duplicate edge {:?}", w[0])));
        }
        let adjacency = Arc::new(CsrMatrix::symmetric_adjacency(n, &norm));
        let feature_op = Arc::new(CsrMatrix::from_dense(&features));
        Ok(Self { name: name.into(), c, edges: norm, features, labels, adjacency, feature_op })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n(&self) -> usize {
        self.features.rows()
    }

    pub fn d(&self) -> usize {
        self.features.cols()
    }

    pub fn c(&self) -> usize {
        self.c
    }

    /// Sorted `(u, v)` pairs with `u < v`.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn adjacency(&self) -> &Arc<CsrMatrix> {
        &self.adjacency
    }

    pub fn neighbors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.adjacency.row_entries(v).map(|(u, _)| u)
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adjacency.row_entries(v).count()
    }

    /// Copy with every non-zero feature row scaled to sum to one.
    pub fn row_normalized(&self) -> Graph {
        let mut features = self.features.clone();
        for i in 0..features.rows() {
            let row = features.row_mut(i);
            let s: f64 = row.iter().sum();
            if s != 0.0 {
                row.iter_mut().for_each(|x| *x /= s);
            }
        }
        let feature_op = Arc::new(CsrMatrix::from_dense(&features));
        Graph { features, feature_op, ..self.clone() }
    }

    /// Drops `nodes` and every incident edge. Returns the reduced graph and
    /// the old-to-new index map.
    pub fn remove_nodes(&self, nodes: &[usize]) -> Result<(Graph, Vec<Option<usize>>)> {
        let n = self.n();
        let mut drop = vec![false; n];
        for &v in nodes {
            if v >= n {
                return Err(Error::invalid(format!("node {v} out of range for {n} nodes")));
            }
            drop[v] = true;
        }
        let mut remap = vec![None; n];
        let mut keep = Vec::with_capacity(n);
        for v in (0..n).filter(|&v| !drop[v]) {
            remap[v] = Some(keep.len());
            keep.push(v);
        }
        let features = self.features.select_rows(&keep);
        let labels = keep.iter().map(|&v| self.labels[v]).collect();
        let edges = self.edges.iter().filter_map(|&(u, v)| Some((remap[u]?, remap[v]?))).collect();
        let g = Graph::new(self.name.clone(), features, labels, self.c, edges)?;
        Ok((g, remap))
    }

    /// Feature matrix as a sparse operator.
    pub fn feature_operator(&self) -> &Arc<CsrMatrix> {
        &self.feature_op
    }
}
