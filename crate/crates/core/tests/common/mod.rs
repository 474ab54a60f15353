#![allow(dead_code)]

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unlearn_corrupt::attack::{AttackProblem, AttackState};
use unlearn_corrupt::engine::Matrix;
use unlearn_corrupt::graph::{Graph, Split};
use unlearn_corrupt::models::ModelSpec;
use unlearn_corrupt::unlearning::Reduction;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Random connected-ish graph with `n` nodes, `d` features and `c` classes.
pub fn random_graph(n: usize, d: usize, c: usize, p: f64, seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if v == u + 1 || rng.random_bool(p) {
                edges.push((u, v));
            }
        }
    }
    let features = Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
    let labels = (0..n).map(|_| rng.random_range(0..c)).collect();
    Graph::new("random", features, labels, c, edges).unwrap()
}

/// The 8-node, 2-injected, 4-feature instance used by gradient checks.
pub struct Tiny {
    pub graph: Graph,
    pub split: Split,
}

impl Tiny {
    pub fn new(seed: u64) -> Self {
        let graph = random_graph(8, 4, 3, 0.3, seed);
        let split = Split::from_mask(vec![true, true, true, true, true, true, false, false]);
        Self { graph, split }
    }

    pub fn problem(&self, seed: u64) -> AttackProblem<'_> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        AttackProblem {
            graph: &self.graph,
            split: &self.split,
            injected_labels: vec![0, 2],
            budget: 2,
            theta: ModelSpec::Gcn { hidden: 5 }.init(4, 3, seed),
            pseudo_labels: vec![rng.random_range(0..3), rng.random_range(0..3)],
            benign: vec![1],
            lambda: 1.0,
            gamma: 1.0,
            eta_un: 0.5,
            unlearn_reduction: Reduction::Mean,
            loss_reduction: Reduction::Sum,
            candidates: None,
            fix_intra: false,
        }
    }

    pub fn state(&self, seed: u64) -> AttackState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1234);
        let a_intra_upper = rng.random_range(-2.0..2.0);
        AttackState {
            x_inj: Matrix::from_fn(2, 4, |_, _| rng.random_range(-1.0..1.0)),
            a_inter: Matrix::from_fn(2, 8, |_, _| rng.random_range(-2.0..2.0)),
            a_intra: Matrix::from_fn(2, 2, |i, k| if i == k { 0.0 } else { a_intra_upper }),
        }
    }
}

/// `|a - b| <= rel * max(|a|, |b|) + abs`.
pub fn close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + abs
}
