//! End-to-end experiments: inject, train the victim, unlearn, measure.

mod report;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{baseline_inject, optim_attack, sample_benign_set, AttackConfig, BaselineKind};
use crate::derive_seed;
use crate::error::{Error, Result, StageExt};
use crate::graph::{split_nodes, Graph, InjectedGraph, InjectionPlan, Split};
use crate::models::{evaluate, train, Metrics, ModelParams, ModelSpec, TrainConfig};
use crate::unlearning::{retrain_unlearn, unlearn, UnlearnConfig, UnlearnMethod};

pub use report::{read_report, render_report, write_csv, write_report, ReportFormat, SweepRow, CSV_HEADER};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    NoAttack,
    Baseline(BaselineKind),
    Optim,
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttackKind::NoAttack => f.write_str("noattack"),
            AttackKind::Baseline(k) => k.fmt(f),
            AttackKind::Optim => f.write_str("optim"),
        }
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noattack" => Ok(AttackKind::NoAttack),
            "optim" => Ok(AttackKind::Optim),
            other => other.parse().map(AttackKind::Baseline),
        }
    }
}

/// The three independent randomness axes of a trial.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrialSeeds {
    pub split: u64,
    pub attack: u64,
    pub victim: u64,
}

impl TrialSeeds {
    /// Fixed split with `count` consecutive attack/victim seeds.
    pub fn trials(split: u64, attack: u64, victim: u64, count: usize) -> Vec<TrialSeeds> {
        (0..count as u64).map(|i| TrialSeeds { split, attack: attack + i, victim: victim + i }).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub train_fraction: f64,
    pub seeds: TrialSeeds,
    pub attack_kind: AttackKind,
    pub attack: AttackConfig,
    pub victim: ModelSpec,
    pub victim_train: TrainConfig,
    pub unlearn: UnlearnConfig,
    pub benign_unlearn: UnlearnConfig,
    /// Size of the benign unlearning request; `None` uses the injected count.
    pub benign_size: Option<usize>,
    pub normalize_features: bool,
    /// Include wall-clock timings in the report (breaks byte-identical output).
    pub record_timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.9,
            seeds: TrialSeeds { split: 0, attack: 0, victim: 0 },
            attack_kind: AttackKind::Optim,
            attack: AttackConfig::default(),
            victim: ModelSpec::DEFAULT_GCN,
            victim_train: TrainConfig::default(),
            unlearn: UnlearnConfig::default(),
            benign_unlearn: UnlearnConfig::default(),
            benign_size: None,
            normalize_features: false,
            record_timing: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub attack_s: f64,
    pub train_s: f64,
    pub unlearn_s: f64,
    pub benign_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub dataset: String,
    pub attack: AttackKind,
    pub victim: ModelSpec,
    pub original_accuracy: f64,
    pub unlearned_accuracy: f64,
    pub delta_acc: f64,
    pub original_f1: f64,
    pub unlearned_f1: f64,
    pub benign_accuracy: f64,
    pub benign_f1: f64,
    pub diverged: bool,
    pub benign_diverged: bool,
    pub injected: usize,
    pub unlearned_nodes: usize,
    pub benign_nodes: usize,
    pub seeds: TrialSeeds,
    pub config: ExperimentConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

/// A plan plus the nodes whose removal the experiment requests.
#[derive(Clone, Debug)]
pub struct PreparedAttack {
    pub split: Split,
    pub plan: InjectionPlan,
    pub forget: Vec<usize>,
    pub seconds: f64,
}

fn graph_for(graph: &Graph, config: &ExperimentConfig) -> Graph {
    if config.normalize_features {
        graph.row_normalized()
    } else {
        graph.clone()
    }
}

/// Split and injection plan for one trial.
pub fn prepare_attack(graph: &Graph, config: &ExperimentConfig) -> Result<PreparedAttack> {
    let split = split_nodes(graph.n(), config.train_fraction, config.seeds.split).stage("split")?;
    let start = Instant::now();
    let m = config.attack.injected_count(graph.n());
    let attack_cfg = AttackConfig { seed: config.seeds.attack, ..config.attack.clone() };
    let (plan, forget) = match config.attack_kind {
        AttackKind::NoAttack => {
            let plan = InjectionPlan::empty(graph.n(), graph.d(), config.attack.budget);
            let forget = sample_benign_set(&split.labeled_nodes(), &[], m, derive_seed(config.seeds.attack, 10))
                .stage("attack")?;
            (plan, forget)
        }
        AttackKind::Baseline(kind) => {
            let plan =
                baseline_inject(graph, &split, kind, m, config.attack.budget, derive_seed(config.seeds.attack, 1))
                    .stage("attack")?;
            (plan, (graph.n()..graph.n() + m).collect())
        }
        AttackKind::Optim => {
            let out = optim_attack(graph, &split, &attack_cfg).stage("attack")?;
            (out.plan, (graph.n()..graph.n() + m).collect())
        }
    };
    Ok(PreparedAttack { split, plan, forget, seconds: start.elapsed().as_secs_f64() })
}

fn metrics_on(pred: &[usize], inj: &InjectedGraph, nodes: &[usize]) -> Result<Metrics> {
    let truth: Vec<usize> = nodes.iter().map(|&v| inj.labels()[v]).collect();
    evaluate(pred, &truth, inj.c())
}

/// Unlearns `forget` from `params`; returns test predictions and the divergence flag.
fn unlearned_predictions(
    inj: &InjectedGraph,
    spec: ModelSpec,
    params: &ModelParams,
    forget: &[usize],
    config: &UnlearnConfig,
    retrain: &TrainConfig,
    nodes: &[usize],
) -> Result<(Vec<usize>, bool)> {
    match config.method {
        UnlearnMethod::Retrain => {
            let out = retrain_unlearn(inj, spec, forget, retrain)?;
            Ok((out.predict(nodes)?, false))
        }
        _ => {
            let out = unlearn(inj, params, forget, config)?;
            Ok((out.params.predict(inj, nodes)?, out.diverged))
        }
    }
}

/// Trains `victim` on the poisoned graph and measures it before and after
/// unlearning, and after a benign request.
pub fn evaluate_plan(
    graph: &Graph,
    prepared: &PreparedAttack,
    victim: ModelSpec,
    config: &ExperimentConfig,
) -> Result<ExperimentReport> {
    let mut timing = Timing { attack_s: prepared.seconds, ..Timing::default() };
    let inj = InjectedGraph::new(graph, &prepared.split, &prepared.plan).stage("train")?;
    let test = inj.test_nodes();
    let tc = TrainConfig { seed: config.seeds.victim, ..config.victim_train };

    let start = Instant::now();
    let params = train(&inj, victim, &inj.labeled_nodes(), &tc).stage("train")?.params;
    let original = metrics_on(&params.predict(&inj, &test).stage("train")?, &inj, &test).stage("train")?;
    timing.train_s = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let (pred, diverged) =
        unlearned_predictions(&inj, victim, &params, &prepared.forget, &config.unlearn, &tc, &test).stage("unlearn")?;
    let unlearned = metrics_on(&pred, &inj, &test).stage("unlearn")?;
    timing.unlearn_s = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let benign_size = config.benign_size.unwrap_or(prepared.forget.len());
    let benign = sample_benign_set(
        &prepared.split.labeled_nodes(),
        &prepared.forget,
        benign_size,
        derive_seed(config.seeds.victim, 20),
    )
    .stage("benign")?;
    let (pred, benign_diverged) =
        unlearned_predictions(&inj, victim, &params, &benign, &config.benign_unlearn, &tc, &test).stage("benign")?;
    let benign_metrics = metrics_on(&pred, &inj, &test).stage("benign")?;
    timing.benign_s = start.elapsed().as_secs_f64();

    Ok(ExperimentReport {
        dataset: graph.name().to_string(),
        attack: config.attack_kind,
        victim,
        original_accuracy: original.accuracy,
        unlearned_accuracy: unlearned.accuracy,
        delta_acc: original.accuracy - unlearned.accuracy,
        original_f1: original.macro_f1,
        unlearned_f1: unlearned.macro_f1,
        benign_accuracy: benign_metrics.accuracy,
        benign_f1: benign_metrics.macro_f1,
        diverged,
        benign_diverged,
        injected: prepared.plan.m(),
        unlearned_nodes: prepared.forget.len(),
        benign_nodes: benign.len(),
        seeds: config.seeds,
        config: config.clone(),
        timing: config.record_timing.then_some(timing),
    })
}

/// One full trial.
pub fn run_experiment(graph: &Graph, config: &ExperimentConfig) -> Result<ExperimentReport> {
    let graph = graph_for(graph, config);
    let prepared = prepare_attack(&graph, config)?;
    evaluate_plan(&graph, &prepared, config.victim, config)
}

/// The same configuration over several seed triples, run in parallel.
pub fn run_trials(graph: &Graph, config: &ExperimentConfig, seeds: &[TrialSeeds]) -> Vec<Result<ExperimentReport>> {
    seeds.par_iter().map(|&s| run_experiment(graph, &ExperimentConfig { seeds: s, ..config.clone() })).collect()
}

/// Grid over edge budgets and unlearning ratios; failed cells are kept as rows.
pub fn run_sweep(
    graph: &Graph,
    config: &ExperimentConfig,
    budgets: &[usize],
    ratios: &[f64],
    seeds: &[TrialSeeds],
) -> Result<Vec<SweepRow>> {
    if budgets.is_empty() || ratios.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("sweep grids must be non-empty"));
    }
    let cells: Vec<(usize, f64, TrialSeeds)> =
        budgets.iter().flat_map(|&b| ratios.iter().flat_map(move |&r| seeds.iter().map(move |&s| (b, r, s)))).collect();
    Ok(cells
        .par_iter()
        .map(|&(budget, ratio, seeds)| {
            let mut cfg = config.clone();
            cfg.seeds = seeds;
            cfg.attack.budget = budget;
            cfg.attack.m_fraction = ratio;
            SweepRow { budget, ratio, seeds, result: run_experiment(graph, &cfg).map_err(|e| e.to_string()) }
        })
        .collect())
}

/// One plan, built with the configured surrogate, evaluated against each victim.
pub fn run_transfer(
    graph: &Graph,
    config: &ExperimentConfig,
    victims: &[ModelSpec],
) -> Result<Vec<(ModelSpec, std::result::Result<ExperimentReport, String>)>> {
    let graph = graph_for(graph, config);
    let prepared = prepare_attack(&graph, config)?;
    Ok(victims
        .par_iter()
        .map(|&v| (v, evaluate_plan(&graph, &prepared, v, config).map_err(|e| e.to_string())))
        .collect())
}

/// Mean of a report field over successful trials.
pub fn mean_of(reports: &[ExperimentReport], f: impl Fn(&ExperimentReport) -> f64) -> f64 {
    reports.iter().map(f).sum::<f64>() / reports.len().max(1) as f64
}
