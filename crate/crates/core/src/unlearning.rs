//! Gradient-ascent unlearning and its differentiable one-step form.
//!
//! The objective is `g = retain CE - gamma * forget CE`; descending it keeps
//! the retained nodes fit while pushing the forgotten ones away.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::engine::{CeTargets, EngineError, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{Graph, GraphVars, InjectedGraph, InjectionPlan, Split};
use crate::models::{forward, train, ModelParams, ModelSpec, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnlearnMethod {
    GaMulti,
    OneStep,
    Retrain,
}

impl fmt::Display for UnlearnMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UnlearnMethod::GaMulti => "ga_multi",
            UnlearnMethod::OneStep => "one_step",
            UnlearnMethod::Retrain => "retrain",
        })
    }
}

impl FromStr for UnlearnMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ga_multi" | "ga" => Ok(UnlearnMethod::GaMulti),
            "one_step" => Ok(UnlearnMethod::OneStep),
            "retrain" => Ok(UnlearnMethod::Retrain),
            "gif" | "ceu" | "idea" | "gnndelete" => Err(Error::Unsupported(format!(
                "unlearning method {s:?} is not implemented; only ga_multi, one_step and retrain are available"
            ))),
            other => Err(Error::Unsupported(format!("unlearning method {other:?}"))),
        }
    }
}

/// How the two cross-entropy sums in the objective are scaled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Each sum divided by its node count.
    #[default]
    Mean,
    /// Raw sums.
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlearnConfig {
    pub method: UnlearnMethod,
    pub gamma: f64,
    pub lr: f64,
    pub steps: usize,
    pub reduction: Reduction,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self { method: UnlearnMethod::GaMulti, gamma: 1.0, lr: 0.1, steps: 10, reduction: Reduction::Mean }
    }
}

impl UnlearnConfig {
    pub fn one_step(gamma: f64, lr: f64) -> Self {
        Self { method: UnlearnMethod::OneStep, gamma, lr, steps: 1, reduction: Reduction::Mean }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.gamma, self.lr].iter().any(|x| x.is_nan() || *x < 0.0) {
            return Err(Error::invalid(format!("gamma {} and lr {} must be non-negative", self.gamma, self.lr)));
        }
        if self.method == UnlearnMethod::GaMulti && self.steps == 0 {
            return Err(Error::invalid("gradient-ascent unlearning needs at least one step"));
        }
        Ok(())
    }
}

/// Per-node weights of the objective: `+1` on retained labeled nodes, `-gamma`
/// on forgotten ones, optionally mean-normalized per group.
pub fn objective_targets(
    labels: &[usize],
    split: &Split,
    forget: &[usize],
    gamma: f64,
    reduction: Reduction,
) -> Result<CeTargets> {
    let mut drop = vec![false; split.n()];
    for &v in forget {
        if v >= split.n() || !split.is_labeled(v) {
            return Err(Error::invalid(format!("node {v} is not a labeled node and cannot be unlearned")));
        }
        drop[v] = true;
    }
    let retain: Vec<usize> = split.labeled_nodes().into_iter().filter(|&v| !drop[v]).collect();
    let mut forget: Vec<usize> = forget.to_vec();
    forget.sort_unstable();
    forget.dedup();
    let (wr, wf) = match reduction {
        Reduction::Mean => (
            if retain.is_empty() { 0.0 } else { 1.0 / retain.len() as f64 },
            if forget.is_empty() { 0.0 } else { gamma / forget.len() as f64 },
        ),
        Reduction::Sum => (1.0, gamma),
    };
    let mut weights = vec![0.0; labels.len()];
    retain.iter().for_each(|&v| weights[v] = wr);
    forget.iter().for_each(|&v| weights[v] = -wf);
    Ok(CeTargets::new(labels.to_vec(), weights))
}

/// `g` on the tape, differentiable in the weights and in the graph.
pub fn unlearn_objective(
    tape: &mut Tape,
    spec: ModelSpec,
    graph: &GraphVars,
    weights: &[Var],
    targets: &Arc<CeTargets>,
) -> Result<Var> {
    let z = forward(tape, spec, graph, weights)?;
    Ok(tape.masked_cross_entropy(z, Arc::clone(targets))?)
}

/// `theta - lr * grad_theta g`, recorded so it stays differentiable in the
/// graph variables.
pub fn one_step_unlearn(
    tape: &mut Tape,
    spec: ModelSpec,
    graph: &GraphVars,
    weights: &[Var],
    targets: &Arc<CeTargets>,
    lr: f64,
) -> Result<Vec<Var>> {
    let g = unlearn_objective(tape, spec, graph, weights, targets)?;
    let grads = tape.gradient(g, weights)?;
    weights
        .iter()
        .zip(grads)
        .map(|(&w, dw)| {
            let step = tape.scale(dw, lr)?;
            Ok(tape.sub(w, step)?)
        })
        .collect()
}

/// Result of victim-side unlearning.
#[derive(Clone, Debug)]
pub struct UnlearnOutcome {
    pub params: ModelParams,
    pub steps_taken: usize,
    /// The objective or an iterate went non-finite; `params` is the last
    /// finite iterate.
    pub diverged: bool,
}

fn step(graph: &InjectedGraph, params: &ModelParams, targets: &Arc<CeTargets>, lr: f64) -> Result<Option<ModelParams>> {
    let mut tape = Tape::new();
    let gv = graph.attach(&mut tape)?;
    let w = params.attach(&mut tape);
    match one_step_unlearn(&mut tape, params.spec(), &gv, &w, targets, lr) {
        Ok(next) => {
            let values: Vec<_> = next.iter().map(|&v| tape.value(v).clone()).collect();
            Ok(Some(ModelParams::new(params.spec(), values)?))
        }
        Err(Error::Engine(EngineError::NonFinite { .. })) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Unlearns `forget` from `params` trained on `graph`.
pub fn unlearn(
    graph: &InjectedGraph,
    params: &ModelParams,
    forget: &[usize],
    config: &UnlearnConfig,
) -> Result<UnlearnOutcome> {
    config.validate()?;
    let targets = Arc::new(objective_targets(graph.labels(), graph.split(), forget, config.gamma, config.reduction)?);
    let steps = match config.method {
        UnlearnMethod::OneStep => 1,
        UnlearnMethod::GaMulti => config.steps,
        UnlearnMethod::Retrain => {
            return Err(Error::invalid("retraining needs a training config; call retrain_unlearn"));
        }
    };
    let mut current = params.clone();
    for k in 0..steps {
        match step(graph, &current, &targets, config.lr)? {
            Some(next) => current = next,
            None => {
                log::warn!("unlearning diverged at step {}", k + 1);
                return Ok(UnlearnOutcome { params: current, steps_taken: k, diverged: true });
            }
        }
    }
    Ok(UnlearnOutcome { params: current, steps_taken: steps, diverged: false })
}

/// Model retrained from scratch without `forget`.
#[derive(Clone, Debug)]
pub struct RetrainOutcome {
    pub params: ModelParams,
    pub graph: Graph,
    pub split: Split,
    /// Old index to new index, `None` for removed nodes.
    pub remap: Vec<Option<usize>>,
}

impl RetrainOutcome {
    /// Predictions for nodes given in the original indexing.
    pub fn predict(&self, nodes: &[usize]) -> Result<Vec<usize>> {
        let mapped: Vec<usize> = nodes
            .iter()
            .map(|&v| self.remap[v].ok_or_else(|| Error::invalid(format!("node {v} was removed"))))
            .collect::<Result<_>>()?;
        let empty = InjectionPlan::empty(self.graph.n(), self.graph.d(), 0);
        let inj = InjectedGraph::new(&self.graph, &self.split, &empty)?;
        self.params.predict(&inj, &mapped)
    }
}

/// Removes `forget` with all incident edges and trains from scratch.
pub fn retrain_unlearn(
    graph: &InjectedGraph,
    spec: ModelSpec,
    forget: &[usize],
    config: &TrainConfig,
) -> Result<RetrainOutcome> {
    if let Some(&v) = forget.iter().find(|&&v| v >= graph.size() || !graph.split().is_labeled(v)) {
        return Err(Error::invalid(format!("node {v} is not a labeled node and cannot be unlearned")));
    }
    let (full, split) = graph.materialize()?;
    let (reduced, remap) = full.remove_nodes(forget)?;
    let mask: Vec<bool> = (0..full.n()).filter(|&v| remap[v].is_some()).map(|v| split.is_labeled(v)).collect();
    let split = Split::from_mask(mask);
    let labeled = split.labeled_nodes();
    if labeled.is_empty() {
        return Err(Error::invalid("no labeled nodes remain after removal"));
    }
    let empty = InjectionPlan::empty(reduced.n(), reduced.d(), 0);
    let inj = InjectedGraph::new(&reduced, &split, &empty)?;
    let params = train(&inj, spec, &labeled, config)?.params;
    Ok(RetrainOutcome { params, graph: reduced, split, remap })
}
