mod common;

use common::{close, Tiny};
use unlearn_corrupt::attack::{attack_loss, AttackState, LossOptions};

const EPS: f64 = 1e-6;

fn loss_at(t: &Tiny, seed: u64, state: &AttackState) -> f64 {
    attack_loss(&t.problem(seed), state, LossOptions::default()).unwrap().loss
}

#[test]
fn double_backward_matches_finite_differences() {
    for seed in 0..3 {
        let t = Tiny::new(seed);
        let state = t.state(seed);
        let g = attack_loss(&t.problem(seed), &state, LossOptions::default()).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..2 {
            for j in 0..4 {
                let (mut p, mut q) = (state.clone(), state.clone());
                p.x_inj.set(i, j, state.x_inj.get(i, j) + EPS);
                q.x_inj.set(i, j, state.x_inj.get(i, j) - EPS);
                let fd = (loss_at(&t, seed, &p) - loss_at(&t, seed, &q)) / (2.0 * EPS);
                let an = g.grad_x.get(i, j);
                assert!(close(an, fd, 1e-4, 1e-9), "seed {seed} x[{i}][{j}]: {an} vs {fd}");
                worst = worst.max((an - fd).abs());
            }
            for j in 0..8 {
                let (mut p, mut q) = (state.clone(), state.clone());
                p.a_inter.set(i, j, state.a_inter.get(i, j) + EPS);
                q.a_inter.set(i, j, state.a_inter.get(i, j) - EPS);
                let fd = (loss_at(&t, seed, &p) - loss_at(&t, seed, &q)) / (2.0 * EPS);
                let an = g.grad_inter.get(i, j);
                assert!(close(an, fd, 1e-4, 1e-9), "seed {seed} inter[{i}][{j}]: {an} vs {fd}");
            }
        }
        // the shared intra logit: perturb both mirrored entries
        let (mut p, mut q) = (state.clone(), state.clone());
        for (s, d) in [(&mut p, EPS), (&mut q, -EPS)] {
            let v = state.a_intra.get(0, 1) + d;
            s.a_intra.set(0, 1, v);
            s.a_intra.set(1, 0, v);
        }
        let fd = (loss_at(&t, seed, &p) - loss_at(&t, seed, &q)) / (2.0 * EPS);
        assert!(close(g.grad_intra.get(0, 1), fd, 1e-4, 1e-9), "intra: {} vs {fd}", g.grad_intra.get(0, 1));
        assert_eq!(g.grad_intra.get(1, 0), 0.0);
        let _ = worst;
    }
}

#[test]
fn block_and_dense_routes_agree() {
    let t = Tiny::new(7);
    let state = t.state(7);
    let a = attack_loss(&t.problem(7), &state, LossOptions::default()).unwrap();
    let b = attack_loss(&t.problem(7), &state, LossOptions { dense: true, ..LossOptions::default() }).unwrap();
    assert!(close(a.loss, b.loss, 1e-12, 1e-12));
    for (x, y) in a.grad_inter.as_slice().iter().zip(b.grad_inter.as_slice()) {
        assert!(close(*x, *y, 1e-9, 1e-12), "{x} vs {y}");
    }
    for (x, y) in a.grad_x.as_slice().iter().zip(b.grad_x.as_slice()) {
        assert!(close(*x, *y, 1e-9, 1e-12), "{x} vs {y}");
    }
}

#[test]
fn second_order_path_matters() {
    let t = Tiny::new(3);
    let state = t.state(3);
    let full = attack_loss(&t.problem(3), &state, LossOptions::default()).unwrap();
    let cut = attack_loss(&t.problem(3), &state, LossOptions { detach_inner: true, ..LossOptions::default() }).unwrap();
    assert_eq!(full.loss, cut.loss);
    let diff = full.grad_x.zip_map(&cut.grad_x, |a, b| a - b).frobenius_norm();
    let rel = diff / full.grad_x.frobenius_norm();
    assert!(rel > 0.01, "relative difference {rel}");
}
