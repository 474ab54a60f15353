use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{forward, ModelParams, ModelSpec};
use crate::engine::{CeTargets, Matrix, Tape};
use crate::error::{Error, Result};
use crate::graph::InjectedGraph;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Plain full-batch gradient descent.
    Gd,
    /// Adam with the usual `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 0.01, epochs: 200, weight_decay: 5e-4, seed: 0, optimizer: Optimizer::Adam }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr.is_nan() || self.lr <= 0.0 || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::invalid(format!(
                "lr {} and weight decay {} must be positive",
                self.lr, self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Mean labeled cross-entropy before each update, plus the final value.
    pub losses: Vec<f64>,
}

struct Adam {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(weights: &[Matrix]) -> Self {
        let zeros = || weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect();
        Self { m: zeros(), v: zeros(), t: 0 }
    }

    fn step(&mut self, weights: &mut [Matrix], grads: &[Matrix], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for ((w, g), (m, v)) in weights.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (w, m, v) = (w.as_mut_slice(), m.as_mut_slice(), v.as_mut_slice());
            for (((wi, &gi), mi), vi) in w.iter_mut().zip(g.as_slice()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = Self::B1 * *mi + (1.0 - Self::B1) * gi;
                *vi = Self::B2 * *vi + (1.0 - Self::B2) * gi * gi;
                *wi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Mean labeled cross-entropy and its weight gradients.
fn loss_and_grads(
    graph: &InjectedGraph,
    spec: ModelSpec,
    weights: &[Matrix],
    targets: &Arc<CeTargets>,
) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let gv = graph.attach(&mut tape)?;
    let w: Vec<_> = weights.iter().map(|w| tape.leaf(w.clone())).collect();
    let z = forward(&mut tape, spec, &gv, &w)?;
    let loss = tape.masked_cross_entropy(z, Arc::clone(targets))?;
    let grads = tape.gradient(loss, &w)?;
    Ok((tape.value(loss).item(), grads.into_iter().map(|g| tape.value(g).clone()).collect()))
}

/// Full-batch training on `nodes` with seeded initialization.
pub fn train(graph: &InjectedGraph, spec: ModelSpec, nodes: &[usize], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if nodes.is_empty() {
        return Err(Error::invalid("cannot train on an empty labeled set"));
    }
    let d = graph.graph().d();
    let init = spec.init(d, graph.c(), config.seed);
    let mut weights = init.weights().to_vec();
    let targets = Arc::new(CeTargets::mean_over(graph.labels(), nodes, 1.0));
    let mut adam = Adam::new(&weights);
    let mut losses = Vec::with_capacity(config.epochs + 1);
    for _ in 0..config.epochs {
        let (loss, mut grads) = loss_and_grads(graph, spec, &weights, &targets)?;
        losses.push(loss);
        for (g, w) in grads.iter_mut().zip(&weights) {
            g.axpy(config.weight_decay, w);
        }
        match config.optimizer {
            Optimizer::Gd => {
                for (w, g) in weights.iter_mut().zip(&grads) {
                    w.axpy(-config.lr, g);
                }
            }
            Optimizer::Adam => adam.step(&mut weights, &grads, config.lr),
        }
    }
    if config.epochs > 0 {
        losses.push(loss_and_grads(graph, spec, &weights, &targets)?.0);
    }
    Ok(TrainOutcome { params: ModelParams::new(spec, weights)?, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Graph, InjectionPlan, Split};

    /// Two disconnected triangles with opposite labels and noisy features.
    fn two_cliques() -> (Graph, Split, InjectionPlan) {
        let feats = Matrix::from_fn(6, 3, |i, j| if (i < 3) == (j == 0) { 1.0 } else { 0.1 * j as f64 });
        let edges = vec![(0, 1), (0, 2), (1, 2), (3, 4), (3, 5), (4, 5)];
        let g = Graph::new("cliques", feats, vec![0, 0, 0, 1, 1, 1], 2, edges).unwrap();
        (g, Split::from_mask(vec![true; 6]), InjectionPlan::empty(6, 3, 0))
    }

    #[test]
    fn separable_fixture_reaches_full_accuracy() {
        let (g, s, p) = two_cliques();
        let inj = InjectedGraph::new(&g, &s, &p).unwrap();
        for optimizer in [Optimizer::Gd, Optimizer::Adam] {
            let lr = if optimizer == Optimizer::Gd { 0.5 } else { 0.01 };
            let cfg = TrainConfig { lr, optimizer, ..TrainConfig::default() };
            let out = train(&inj, ModelSpec::DEFAULT_GCN, &s.labeled_nodes(), &cfg).unwrap();
            let pred = out.params.predict(&inj, &[0, 1, 2, 3, 4, 5]).unwrap();
            assert_eq!(pred, g.labels(), "{optimizer:?}");
            assert!(out.losses.last().unwrap() < &out.losses[0]);
        }
    }

    #[test]
    fn zero_epochs_returns_init() {
        let (g, s, p) = two_cliques();
        let inj = InjectedGraph::new(&g, &s, &p).unwrap();
        let cfg = TrainConfig { epochs: 0, seed: 9, ..TrainConfig::default() };
        let out = train(&inj, ModelSpec::DEFAULT_GCN, &[0], &cfg).unwrap();
        assert_eq!(out.params, ModelSpec::DEFAULT_GCN.init(3, 2, 9));
    }

    #[test]
    fn empty_labeled_set_rejected() {
        let (g, s, p) = two_cliques();
        let inj = InjectedGraph::new(&g, &s, &p).unwrap();
        assert!(train(&inj, ModelSpec::DEFAULT_GCN, &[], &TrainConfig::default()).is_err());
    }
}
