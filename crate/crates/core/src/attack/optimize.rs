//! Gradient ascent on the attack loss over sigmoid-relaxed injected edges,
//! followed by a single top-B projection.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::baselines::{baseline_inject, BaselineKind};
use super::projection::project_top_b;
use super::sample_benign_set;
use crate::derive_seed;
use crate::engine::{CeTargets, Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{khop_candidates, CandidateConfig, CandidateSet, Graph, InjectedGraph, InjectionPlan, Split};
use crate::models::{forward, train, ModelParams, ModelSpec, TrainConfig};
use crate::unlearning::{objective_targets, one_step_unlearn, Reduction};

/// Free-variable value for "edge present" in the initial plan.
const LIFT_ON: f64 = 0.9;
/// Free-variable value for "edge absent" in the initial plan.
const LIFT_OFF: f64 = 0.01;
/// Free-variable value of entries outside the candidate set.
const FROZEN: f64 = -30.0;

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Outer ascent steps.
    pub steps: usize,
    pub eta_x: f64,
    pub eta_a: f64,
    /// Weight of the benign-unlearning term.
    pub lambda: f64,
    pub budget: usize,
    /// Injected nodes as a fraction of the original node count.
    pub m_fraction: f64,
    pub init: BaselineKind,
    /// Size of the benign set; `None` uses the injected node count.
    pub benign_size: Option<usize>,
    pub candidates: Option<CandidateConfig>,
    pub fix_intra: bool,
    /// Inner one-step unlearning on the surrogate.
    pub gamma: f64,
    pub eta_un: f64,
    pub unlearn_reduction: Reduction,
    /// Scaling of the pseudo-label cross-entropy sums in the attack loss.
    pub loss_reduction: Reduction,
    pub surrogate: ModelSpec,
    pub surrogate_train: TrainConfig,
    /// Retrain the surrogate on the current projected plan every `R` steps.
    pub refresh_every: Option<usize>,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            eta_x: 5e-4,
            eta_a: 0.5,
            lambda: 1.0,
            budget: 5,
            m_fraction: 0.05,
            init: BaselineKind::Random,
            benign_size: None,
            candidates: None,
            fix_intra: false,
            gamma: 1.0,
            eta_un: 0.1,
            unlearn_reduction: Reduction::Mean,
            loss_reduction: Reduction::Sum,
            surrogate: ModelSpec::DEFAULT_GCN,
            surrogate_train: TrainConfig::default(),
            refresh_every: None,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(msg));
        if self.steps == 0 {
            return bad("attack needs at least one step".into());
        }
        if !(self.eta_x >= 0.0 && self.eta_a >= 0.0) {
            return bad(format!("step sizes must be non-negative, got {} and {}", self.eta_x, self.eta_a));
        }
        if [self.lambda, self.gamma, self.eta_un].iter().any(|x| x.is_nan() || *x < 0.0) {
            return bad("lambda, gamma and eta_un must be non-negative".into());
        }
        if self.budget == 0 {
            return bad("edge budget must be at least 1".into());
        }
        if !(self.m_fraction > 0.0 && self.m_fraction <= 1.0) {
            return bad(format!("m_fraction {} not in (0, 1]", self.m_fraction));
        }
        if self.refresh_every == Some(0) {
            return bad("refresh interval must be positive".into());
        }
        self.surrogate_train.validate()
    }

    /// Injected node count for a graph with `n` nodes.
    pub fn injected_count(&self, n: usize) -> usize {
        ((self.m_fraction * n as f64).round() as usize).max(1)
    }
}

/// Free variables of the relaxed problem.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackState {
    pub x_inj: Matrix,
    /// m x n logits of inter edges.
    pub a_inter: Matrix,
    /// m x m logits of intra edges; symmetric, only the strict upper
    /// triangle is used.
    pub a_intra: Matrix,
}

impl AttackState {
    /// Logit lift of a binary plan; columns outside `mask` are frozen.
    pub fn lift(plan: &InjectionPlan, mask: Option<&[bool]>) -> Self {
        let (on, off) = (logit(LIFT_ON), logit(LIFT_OFF));
        let a_inter = Matrix::from_fn(plan.m(), plan.n(), |i, j| {
            if mask.is_some_and(|mk| !mk[j]) {
                FROZEN
            } else if plan.inter().get(i, j) > 0.5 {
                on
            } else {
                off
            }
        });
        let a_intra = Matrix::from_fn(plan.m(), plan.m(), |i, k| {
            if i == k {
                0.0
            } else if plan.intra().get(i, k) > 0.5 {
                on
            } else {
                off
            }
        });
        Self { x_inj: plan.x_inj().clone(), a_inter, a_intra }
    }

    /// Sigmoid-mapped blocks, with the intra diagonal zeroed.
    pub fn continuous(&self, fix_intra: bool) -> (Matrix, Matrix) {
        let inter = self.a_inter.map(sigmoid);
        let m = self.a_intra.rows();
        let intra =
            Matrix::from_fn(m, m, |i, k| if i == k || fix_intra { 0.0 } else { sigmoid(self.a_intra.get(i, k)) });
        (inter, intra)
    }
}

/// Fixed ingredients of the attack loss.
#[derive(Clone, Debug)]
pub struct AttackProblem<'a> {
    pub graph: &'a Graph,
    /// Split over the original nodes.
    pub split: &'a Split,
    /// Injected labels, never optimized.
    pub injected_labels: Vec<usize>,
    pub budget: usize,
    pub theta: ModelParams,
    /// Pseudo-labels on the original unlabeled nodes.
    pub pseudo_labels: Vec<usize>,
    pub benign: Vec<usize>,
    pub lambda: f64,
    pub gamma: f64,
    pub eta_un: f64,
    pub unlearn_reduction: Reduction,
    pub loss_reduction: Reduction,
    pub candidates: Option<CandidateSet>,
    pub fix_intra: bool,
}

/// Knobs that only matter for tests.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LossOptions {
    /// Treat the unlearned parameters as constants of the injected variables.
    pub detach_inner: bool,
    /// Go through the explicit dense adjacency.
    pub dense: bool,
}

/// Value and gradients of the attack loss at one state.
#[derive(Clone, Debug)]
pub struct AttackLoss {
    pub loss: f64,
    pub damage: f64,
    pub benign: f64,
    pub grad_x: Matrix,
    pub grad_inter: Matrix,
    pub grad_intra: Matrix,
}

impl AttackProblem<'_> {
    fn m(&self) -> usize {
        self.injected_labels.len()
    }

    fn placeholder_plan(&self) -> Result<InjectionPlan> {
        let m = self.m();
        InjectionPlan::new(
            Matrix::zeros(m, self.graph.d()),
            Matrix::zeros(m, self.graph.n()),
            Matrix::zeros(m, m),
            self.injected_labels.clone(),
            self.budget,
        )
    }

    fn pseudo_targets(&self, size: usize) -> Result<CeTargets> {
        let test = self.split.unlabeled_nodes();
        if test.len() != self.pseudo_labels.len() {
            return Err(Error::Shape(format!(
                "{} pseudo-labels for {} unlabeled nodes",
                self.pseudo_labels.len(),
                test.len()
            )));
        }
        let w = match self.loss_reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / test.len().max(1) as f64,
        };
        let mut labels = vec![0; size];
        let mut weights = vec![0.0; size];
        for (&v, &y) in test.iter().zip(&self.pseudo_labels) {
            labels[v] = y;
            weights[v] = w;
        }
        Ok(CeTargets::new(labels, weights))
    }
}

fn unlearned(
    tape: &mut Tape,
    problem: &AttackProblem,
    gv: &crate::graph::GraphVars,
    weights: &[Var],
    targets: &Arc<CeTargets>,
    detach: Option<&dyn Fn() -> Result<Vec<Matrix>>>,
) -> Result<Vec<Var>> {
    match detach {
        None => one_step_unlearn(tape, problem.theta.spec(), gv, weights, targets, problem.eta_un),
        Some(values) => Ok(values()?.into_iter().map(|m| tape.leaf(m)).collect()),
    }
}

/// Attack loss `damage - lambda * benign` and its gradients with respect to
/// the free variables, differentiating through the one-step unlearning.
pub fn attack_loss(problem: &AttackProblem, state: &AttackState, options: LossOptions) -> Result<AttackLoss> {
    let plan = problem.placeholder_plan()?;
    let inj = InjectedGraph::new(problem.graph, problem.split, &plan)?;
    let (n, m) = (inj.n(), inj.m());
    let spec = problem.theta.spec();
    let pseudo = Arc::new(problem.pseudo_targets(inj.size())?);
    let delta = Arc::new(objective_targets(
        inj.labels(),
        inj.split(),
        &inj.injected_nodes(),
        problem.gamma,
        problem.unlearn_reduction,
    )?);
    let benign = Arc::new(objective_targets(
        inj.labels(),
        inj.split(),
        &problem.benign,
        problem.gamma,
        problem.unlearn_reduction,
    )?);

    let build = |tape: &mut Tape| -> Result<(Var, Var, Var, crate::graph::GraphVars)> {
        let xv = tape.leaf(state.x_inj.clone());
        let ai = tape.leaf(state.a_inter.clone());
        let au = tape.leaf(state.a_intra.clone());
        let mut inter = tape.sigmoid(ai)?;
        if let Some(c) = &problem.candidates {
            let mask = Matrix::from_fn(m, n, |_, j| if c.contains(j) { 1.0 } else { 0.0 });
            let mask = tape.leaf(mask);
            inter = tape.mul(inter, mask)?;
        }
        let intra = if problem.fix_intra {
            tape.leaf(Matrix::zeros(m, m))
        } else {
            let upper = tape.leaf(Matrix::from_fn(m, m, |i, k| if k > i { 1.0 } else { 0.0 }));
            let s = tape.sigmoid(au)?;
            let s = tape.mul(s, upper)?;
            let st = tape.transpose(s)?;
            tape.add(s, st)?
        };
        let gv = if options.dense {
            inj.attach_dense_with(tape, xv, inter, intra)?
        } else {
            inj.attach_with(tape, xv, inter, intra)?
        };
        Ok((xv, ai, au, gv))
    };

    // Constant unlearned parameters for the detached variant.
    let detached = |targets: &Arc<CeTargets>| -> Result<Vec<Matrix>> {
        let mut t = Tape::new();
        let (_, _, _, gv) = build(&mut t)?;
        let w = problem.theta.attach(&mut t);
        let out = one_step_unlearn(&mut t, spec, &gv, &w, targets, problem.eta_un)?;
        Ok(out.into_iter().map(|v| t.value(v).clone()).collect())
    };

    let mut tape = Tape::new();
    let (xv, ai, au, gv) = build(&mut tape)?;
    let w = problem.theta.attach(&mut tape);

    let det_delta = || detached(&delta);
    let theta_delta = unlearned(&mut tape, problem, &gv, &w, &delta, options.detach_inner.then_some(&det_delta as _))?;
    let z = forward(&mut tape, spec, &gv, &theta_delta)?;
    let damage = tape.masked_cross_entropy(z, Arc::clone(&pseudo))?;

    let det_benign = || detached(&benign);
    let theta_benign =
        unlearned(&mut tape, problem, &gv, &w, &benign, options.detach_inner.then_some(&det_benign as _))?;
    let z0 = forward(&mut tape, spec, &gv, &theta_benign)?;
    let l0 = tape.masked_cross_entropy(z0, Arc::clone(&pseudo))?;
    let loss = if problem.lambda != 0.0 {
        let scaled = tape.scale(l0, problem.lambda)?;
        tape.sub(damage, scaled)?
    } else {
        damage
    };

    let grads = tape.gradient(loss, &[xv, ai, au])?;
    let mut grad_intra = tape.value(grads[2]).clone();
    for i in 0..m {
        for k in 0..=i {
            grad_intra.set(i, k, 0.0);
        }
    }
    Ok(AttackLoss {
        loss: tape.value(loss).item(),
        damage: tape.value(damage).item(),
        benign: tape.value(l0).item(),
        grad_x: tape.value(grads[0]).clone(),
        grad_inter: tape.value(grads[1]).clone(),
        grad_intra,
    })
}

/// Everything the optimizer produced.
#[derive(Clone, Debug)]
pub struct AttackOutcome {
    pub plan: InjectionPlan,
    pub init_plan: InjectionPlan,
    /// Attack loss before each ascent step.
    pub trace: Vec<f64>,
    pub state: AttackState,
    pub surrogate: ModelParams,
    pub pseudo_labels: Vec<usize>,
    pub benign: Vec<usize>,
    pub candidates: Option<CandidateSet>,
}

fn surrogate_for(
    graph: &Graph,
    split: &Split,
    plan: &InjectionPlan,
    config: &AttackConfig,
    round: u64,
) -> Result<(ModelParams, Vec<usize>)> {
    let inj = InjectedGraph::new(graph, split, plan)?;
    let tc = TrainConfig { seed: derive_seed(config.seed, 0x5u64 << 32 | round), ..config.surrogate_train };
    let theta = train(&inj, config.surrogate, &inj.labeled_nodes(), &tc)?.params;
    let pseudo = theta.predict(&inj, &inj.test_nodes())?;
    Ok((theta, pseudo))
}

fn project(problem: &AttackProblem, state: &AttackState) -> Result<InjectionPlan> {
    let (inter, intra) = state.continuous(problem.fix_intra);
    let mask = problem.candidates.as_ref().map(CandidateSet::mask);
    let (inter, intra) = project_top_b(&inter, &intra, problem.budget, mask, !problem.fix_intra);
    InjectionPlan::new(state.x_inj.clone(), inter, intra, problem.injected_labels.clone(), problem.budget)
}

/// Moves init edges that fall outside the candidate set onto random
/// candidate columns, keeping each row's degree where possible.
fn confine_to_candidates(
    plan: &InjectionPlan,
    cand: &CandidateSet,
    fix_intra: bool,
    seed: u64,
) -> Result<InjectionPlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for i in 0..plan.m() {
        let row = plan.inter().row(i);
        let kept: Vec<usize> = cand.nodes().iter().copied().filter(|&j| row[j] > 0.5).collect();
        let moved = row.iter().enumerate().filter(|&(j, &a)| a > 0.5 && !cand.contains(j)).count();
        let free: Vec<usize> = cand.nodes().iter().copied().filter(|&j| row[j] <= 0.5).collect();
        let extra = sample(&mut rng, free.len(), moved.min(free.len())).into_iter().map(|k| free[k]);
        edges.extend(kept.into_iter().chain(extra).map(|j| (i, j)));
    }
    let intra = if fix_intra { Vec::new() } else { plan.intra_edges() };
    InjectionPlan::from_edges(plan.n(), plan.x_inj().clone(), plan.labels().to_vec(), &edges, &intra, plan.budget())
}

/// Runs the full attack: baseline initialization, surrogate training,
/// `steps` ascent steps and the final projection.
pub fn optim_attack(graph: &Graph, split: &Split, config: &AttackConfig) -> Result<AttackOutcome> {
    config.validate()?;
    let m = config.injected_count(graph.n());
    let candidates = config
        .candidates
        .as_ref()
        .map(|c| khop_candidates(graph, &split.unlabeled_nodes(), c, derive_seed(config.seed, 3)))
        .transpose()?;
    let mut init_plan = baseline_inject(graph, split, config.init, m, config.budget, derive_seed(config.seed, 1))?;
    if let Some(c) = &candidates {
        init_plan = confine_to_candidates(&init_plan, c, config.fix_intra, derive_seed(config.seed, 4))?;
    }
    let (theta, pseudo) = surrogate_for(graph, split, &init_plan, config, 0)?;
    let injected: Vec<usize> = (graph.n()..graph.n() + m).collect();
    let benign = sample_benign_set(
        &split.labeled_nodes(),
        &injected,
        config.benign_size.unwrap_or(m),
        derive_seed(config.seed, 2),
    )?;

    let mut problem = AttackProblem {
        graph,
        split,
        injected_labels: init_plan.labels().to_vec(),
        budget: config.budget,
        theta,
        pseudo_labels: pseudo,
        benign,
        lambda: config.lambda,
        gamma: config.gamma,
        eta_un: config.eta_un,
        unlearn_reduction: config.unlearn_reduction,
        loss_reduction: config.loss_reduction,
        candidates,
        fix_intra: config.fix_intra,
    };
    let mut state = AttackState::lift(&init_plan, problem.candidates.as_ref().map(CandidateSet::mask));
    let mut trace = Vec::with_capacity(config.steps);
    for t in 0..config.steps {
        if let Some(r) = config.refresh_every {
            if t > 0 && t % r == 0 {
                let current = project(&problem, &state)?;
                let (theta, pseudo) = surrogate_for(graph, split, &current, config, t as u64)?;
                problem.theta = theta;
                problem.pseudo_labels = pseudo;
            }
        }
        let step = attack_loss(&problem, &state, LossOptions::default())
            .map_err(|e| Error::invalid(format!("attack step {}: {e}", t + 1)))?;
        if !step.loss.is_finite() {
            return Err(Error::invalid(format!("attack step {}: non-finite loss", t + 1)));
        }
        log::debug!("attack step {} loss {:.6}", t + 1, step.loss);
        trace.push(step.loss);
        state.x_inj.axpy(config.eta_x, &step.grad_x);
        state.a_inter.axpy(config.eta_a, &step.grad_inter);
        state.a_intra.axpy(config.eta_a, &step.grad_intra);
        let mm = state.a_intra.rows();
        for i in 0..mm {
            for k in 0..i {
                let upper = state.a_intra.get(k, i);
                state.a_intra.set(i, k, upper);
            }
        }
    }
    let plan = project(&problem, &state)?;
    Ok(AttackOutcome {
        plan,
        init_plan,
        trace,
        state,
        surrogate: problem.theta,
        pseudo_labels: problem.pseudo_labels,
        benign: problem.benign,
        candidates: problem.candidates,
    })
}
