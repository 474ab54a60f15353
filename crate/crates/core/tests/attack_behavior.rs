mod common;

use common::{random_graph, Tiny};
use unlearn_corrupt::attack::{attack_loss, optim_attack, AttackConfig, LossOptions};
use unlearn_corrupt::graph::{split_nodes, CandidateConfig};
use unlearn_corrupt::models::TrainConfig;

fn quick(steps: usize) -> AttackConfig {
    AttackConfig {
        steps,
        budget: 2,
        m_fraction: 0.1,
        surrogate_train: TrainConfig { epochs: 50, ..TrainConfig::default() },
        ..AttackConfig::default()
    }
}

#[test]
fn zero_lambda_is_pure_damage() {
    let t = Tiny::new(3);
    let mut p = t.problem(3);
    p.lambda = 0.0;
    let l = attack_loss(&p, &t.state(3), LossOptions::default()).unwrap();
    assert_eq!(l.loss, l.damage);
}

#[test]
fn frozen_unlearning_collapses_both_terms() {
    let t = Tiny::new(5);
    let state = t.state(5);
    let mut p = t.problem(5);
    p.eta_un = 0.0;
    for lambda in [0.0, 0.4, 1.0, 2.5] {
        p.lambda = lambda;
        let l = attack_loss(&p, &state, LossOptions::default()).unwrap();
        assert_eq!(l.damage, l.benign);
        assert!((l.loss - (1.0 - lambda) * l.damage).abs() < 1e-12);
    }
    // at lambda = 1 the two terms cancel, so nothing moves the state
    p.lambda = 1.0;
    let l = attack_loss(&p, &state, LossOptions::default()).unwrap();
    assert!(l.grad_x.max_abs() < 1e-12 && l.grad_inter.max_abs() < 1e-12);
}

#[test]
fn stationary_attack_returns_its_initialization() {
    let g = random_graph(30, 4, 3, 0.1, 1);
    let split = split_nodes(30, 0.6, 1).unwrap();
    let cfg = AttackConfig { eta_x: 0.0, eta_a: 0.0, ..quick(1) };
    let out = optim_attack(&g, &split, &cfg).unwrap();
    assert_eq!(out.trace.len(), 1);
    assert_eq!(out.plan, out.init_plan);
}

#[test]
fn attack_is_seeded_and_budget_feasible() {
    let g = random_graph(30, 4, 3, 0.1, 2);
    let split = split_nodes(30, 0.6, 2).unwrap();
    let a = optim_attack(&g, &split, &quick(3)).unwrap();
    let b = optim_attack(&g, &split, &quick(3)).unwrap();
    assert_eq!(a.plan, b.plan);
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.plan.m(), 3);
    assert!(a.plan.within_budget() && a.plan.is_binary());
}

#[test]
fn candidate_edges_stay_inside_the_candidate_set() {
    let g = random_graph(40, 4, 3, 0.05, 9);
    let split = split_nodes(40, 0.7, 9).unwrap();
    let cfg = AttackConfig {
        candidates: Some(CandidateConfig { k: 1, target_fraction: 0.5, neighbors_per_target: None }),
        fix_intra: true,
        ..quick(4)
    };
    let out = optim_attack(&g, &split, &cfg).unwrap();
    let cand = out.candidates.as_ref().unwrap();
    assert!(cand.len() < 40);
    for plan in [&out.init_plan, &out.plan] {
        assert!(plan.inter_edges().iter().all(|&(_, j)| cand.contains(j)));
        assert!(plan.intra_edges().is_empty());
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let g = random_graph(10, 2, 2, 0.2, 0);
    let split = split_nodes(10, 0.5, 0).unwrap();
    for cfg in [
        AttackConfig { steps: 0, ..quick(1) },
        AttackConfig { budget: 0, ..quick(1) },
        AttackConfig { m_fraction: 0.0, ..quick(1) },
        AttackConfig { lambda: -1.0, ..quick(1) },
        AttackConfig { refresh_every: Some(0), ..quick(1) },
    ] {
        assert!(optim_attack(&g, &split, &cfg).is_err());
    }
}
