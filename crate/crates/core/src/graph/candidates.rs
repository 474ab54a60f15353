use std::collections::{BTreeSet, VecDeque};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Graph;
use crate::error::{Error, Result};

/// Where injected edges may land.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateConfig {
    pub k: usize,
    pub target_fraction: f64,
    /// `None` keeps every node of each sampled neighborhood.
    pub neighbors_per_target: Option<usize>,
}

impl CandidateConfig {
    pub fn full(k: usize) -> Self {
        Self { k, target_fraction: 1.0, neighbors_per_target: None }
    }
}

/// Candidate node set plus the matching column mask over `[0, n)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateSet {
    nodes: Vec<usize>,
    mask: Vec<bool>,
}

impl CandidateSet {
    pub fn from_nodes(n: usize, nodes: impl IntoIterator<Item = usize>) -> Self {
        let mut mask = vec![false; n];
        let set: BTreeSet<usize> = nodes.into_iter().collect();
        for &v in &set {
            mask[v] = true;
        }
        Self { nodes: set.into_iter().collect(), mask }
    }

    /// Sorted node indices.
    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn contains(&self, v: usize) -> bool {
        self.mask[v]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Nodes within `k` hops of `source`, excluding `source`, in BFS order.
fn ball(graph: &Graph, source: usize, k: usize) -> Vec<usize> {
    let mut dist = std::collections::HashMap::from([(source, 0usize)]);
    let mut queue = VecDeque::from([source]);
    let mut out = Vec::new();
    while let Some(u) = queue.pop_front() {
        let du = dist[&u];
        if du == k {
            continue;
        }
        for v in graph.neighbors(u) {
            if let std::collections::hash_map::Entry::Vacant(e) = dist.entry(v) {
                e.insert(du + 1);
                out.push(v);
                queue.push_back(v);
            }
        }
    }
    out
}

/// Union of sampled k-hop neighborhoods of `targets`, plus the sampled
/// targets themselves.
pub fn khop_candidates(graph: &Graph, targets: &[usize], config: &CandidateConfig, seed: u64) -> Result<CandidateSet> {
    let n = graph.n();
    if let Some(&t) = targets.iter().find(|&&t| t >= n) {
        return Err(Error::invalid(format!("target {t} out of range for {n} nodes")));
    }
    if !(config.target_fraction > 0.0 && config.target_fraction <= 1.0) {
        return Err(Error::invalid(format!("target fraction {} not in (0, 1]", config.target_fraction)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sorted: Vec<usize> = targets.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let sampled: Vec<usize> = if config.target_fraction >= 1.0 {
        sorted
    } else {
        let count = ((config.target_fraction * sorted.len() as f64).round() as usize).clamp(1, sorted.len().max(1));
        let mut idx: Vec<usize> = sample(&mut rng, sorted.len(), count.min(sorted.len())).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| sorted[i]).collect()
    };
    let mut out = BTreeSet::new();
    for &t in &sampled {
        out.insert(t);
        let mut near = ball(graph, t, config.k);
        match config.neighbors_per_target {
            Some(p) if near.len() > p => {
                near.sort_unstable();
                let mut idx = sample(&mut rng, near.len(), p).into_vec();
                idx.sort_unstable();
                out.extend(idx.into_iter().map(|i| near[i]));
            }
            _ => out.extend(near),
        }
    }
    Ok(CandidateSet::from_nodes(n, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Matrix;

    fn path(n: usize) -> Graph {
        Graph::new("path", Matrix::zeros(n, 1), vec![0; n], 1, (1..n).map(|i| (i - 1, i)).collect()).unwrap()
    }

    #[test]
    fn path_two_hops() {
        let s = khop_candidates(&path(5), &[0], &CandidateConfig::full(2), 0).unwrap();
        assert_eq!(s.nodes(), &[0, 1, 2]);
    }

    #[test]
    fn zero_hops_is_targets() {
        let s = khop_candidates(&path(5), &[3, 1], &CandidateConfig::full(0), 0).unwrap();
        assert_eq!(s.nodes(), &[1, 3]);
    }

    #[test]
    fn out_of_range_target() {
        assert!(khop_candidates(&path(5), &[5], &CandidateConfig::full(1), 0).is_err());
    }

    #[test]
    fn per_target_cap() {
        let star = Graph::new("star", Matrix::zeros(8, 1), vec![0; 8], 1, (1..8).map(|i| (0, i)).collect()).unwrap();
        let cfg = CandidateConfig { k: 1, target_fraction: 1.0, neighbors_per_target: Some(3) };
        let s = khop_candidates(&star, &[0], &cfg, 4).unwrap();
        assert_eq!(s.len(), 4);
        assert!(s.contains(0));
        assert_eq!(s, khop_candidates(&star, &[0], &cfg, 4).unwrap());
    }
}
