mod common;

use std::sync::Arc;

use common::close;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unlearn_corrupt::engine::{CeTargets, CsrMatrix, EngineError, Matrix, Tape, Var};

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var, EngineError>;

struct Case {
    name: &'static str,
    shapes: Vec<(usize, usize)>,
    /// Maps a raw uniform draw in [-2, 2] into the op's domain.
    domain: fn(f64) -> f64,
    build: Box<Build>,
}

fn any(x: f64) -> f64 {
    x
}

fn positive(x: f64) -> f64 {
    0.2 + x.abs()
}

fn away_from_zero(x: f64) -> f64 {
    if x.abs() < 0.05 {
        x.signum() * 0.05 + x
    } else {
        x
    }
}

fn case(
    name: &'static str,
    shapes: &[(usize, usize)],
    domain: fn(f64) -> f64,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var, EngineError> + 'static,
) -> Case {
    Case { name, shapes: shapes.to_vec(), domain, build: Box::new(build) }
}

fn sparse() -> Arc<CsrMatrix> {
    Arc::new(CsrMatrix::from_triplets(3, 4, &[(0, 0, 0.5), (0, 3, -1.2), (1, 1, 2.0), (2, 0, 0.7), (2, 2, -0.3)]))
}

fn cases() -> Vec<Case> {
    let s = sparse();
    let s2 = Arc::clone(&s);
    vec![
        case("matmul", &[(3, 4), (4, 2)], any, |t, v| t.matmul(v[0], v[1])),
        case("matmul_ta", &[(4, 3), (4, 2)], any, |t, v| t.matmul_t(v[0], true, v[1], false)),
        case("matmul_tb", &[(3, 4), (2, 4)], any, |t, v| t.matmul_t(v[0], false, v[1], true)),
        case("sparse_matmul", &[(4, 2)], any, move |t, v| t.sparse_matmul(&s, v[0])),
        case("sparse_matmul_t", &[(3, 2)], any, move |t, v| t.sparse_matmul_transposed(&s2, v[0])),
        case("add", &[(3, 2), (3, 2)], any, |t, v| t.add(v[0], v[1])),
        case("add_broadcast_row", &[(3, 2), (1, 2)], any, |t, v| t.add(v[0], v[1])),
        case("sub_broadcast_col", &[(3, 2), (3, 1)], any, |t, v| t.sub(v[0], v[1])),
        case("mul", &[(3, 2), (3, 2)], any, |t, v| t.mul(v[0], v[1])),
        case("mul_scalar", &[(3, 2), (1, 1)], any, |t, v| t.mul(v[0], v[1])),
        case("div", &[(3, 2), (3, 2)], away_from_zero, |t, v| t.div(v[0], v[1])),
        case("scale", &[(2, 3)], any, |t, v| t.scale(v[0], -1.7)),
        case("pow_int", &[(2, 3)], any, |t, v| t.pow(v[0], 3.0)),
        case("pow_frac", &[(2, 3)], positive, |t, v| t.pow(v[0], -0.5)),
        case("exp", &[(2, 3)], any, |t, v| t.exp(v[0])),
        case("sigmoid", &[(2, 3)], any, |t, v| t.sigmoid(v[0])),
        case("relu", &[(2, 3)], away_from_zero, |t, v| t.relu(v[0])),
        case("log_softmax_rows", &[(3, 4)], any, |t, v| t.log_softmax_rows(v[0])),
        case("sum_all", &[(3, 2)], any, |t, v| t.sum_all(v[0])),
        case("column_sums", &[(3, 2)], any, |t, v| t.column_sums(v[0])),
        case("row_sums", &[(3, 2)], any, |t, v| t.row_sums(v[0])),
        case("broadcast_to", &[(1, 3)], any, |t, v| t.broadcast_to(v[0], 4, 3)),
        case("transpose", &[(2, 3)], any, |t, v| t.transpose(v[0])),
        case("row_select", &[(3, 2)], any, |t, v| t.row_select(v[0], &[2, 0, 2])),
        case("row_scatter", &[(2, 2)], any, |t, v| t.row_scatter(v[0], &[3, 1], 4)),
        case("slice", &[(4, 3)], any, |t, v| t.slice(v[0], 1, 1, 2, 2)),
        case("embed", &[(2, 2)], any, |t, v| t.embed(v[0], 1, 0, 4, 3)),
        case("block2x2", &[(2, 2), (2, 1), (1, 2), (1, 1)], any, |t, v| t.block2x2(v[0], v[1], v[2], v[3])),
        case("stack_rows", &[(2, 3), (1, 3)], any, |t, v| t.stack_rows(v[0], v[1])),
        case("masked_cross_entropy", &[(4, 3)], any, |t, v| {
            t.masked_cross_entropy(v[0], Arc::new(CeTargets::new(vec![0, 2, 1, 1], vec![1.0, 0.5, 0.0, 2.0])))
        }),
    ]
}

/// Scalar probe `sum(op(inputs) * r)` with a fixed random weighting `r`.
fn probe(c: &Case, inputs: &[Matrix], r: &Matrix) -> (f64, Vec<Matrix>) {
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| t.leaf(m.clone())).collect();
    let out = (c.build)(&mut t, &vars).unwrap();
    let w = t.leaf(r.clone());
    let prod = t.mul(out, w).unwrap();
    let loss = t.sum_all(prod).unwrap();
    let grads = t.gradient(loss, &vars).unwrap();
    (t.value(loss).item(), grads.iter().map(|&g| t.value(g).clone()).collect())
}

fn output_shape(c: &Case, inputs: &[Matrix]) -> (usize, usize) {
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| t.leaf(m.clone())).collect();
    (c.build)(&mut t, &vars).unwrap().shape()
}

#[test]
fn every_primitive_matches_central_differences() {
    const EPS: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for c in cases() {
        for trial in 0..100 {
            let inputs: Vec<Matrix> = c
                .shapes
                .iter()
                .map(|&(r, k)| Matrix::from_fn(r, k, |_, _| (c.domain)(rng.random_range(-2.0..2.0))))
                .collect();
            let (or, oc) = output_shape(&c, &inputs);
            let r = Matrix::from_fn(or, oc, |_, _| rng.random_range(-1.0..1.0));
            let (_, grads) = probe(&c, &inputs, &r);
            for (k, input) in inputs.iter().enumerate() {
                for idx in 0..input.len() {
                    let mut plus = inputs.clone();
                    let mut minus = inputs.clone();
                    plus[k].as_mut_slice()[idx] += EPS;
                    minus[k].as_mut_slice()[idx] -= EPS;
                    let fd = (probe(&c, &plus, &r).0 - probe(&c, &minus, &r).0) / (2.0 * EPS);
                    let an = grads[k].as_slice()[idx];
                    assert!(close(an, fd, 1e-5, 1e-8), "{} trial {trial} input {k}[{idx}]: {an} vs {fd}", c.name);
                }
            }
        }
    }
}

#[test]
fn second_order_matches_differences_of_gradients() {
    // d/dx <grad f(x), v> for a small composite network
    const EPS: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x0 = Matrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
    let w = Matrix::from_fn(2, 3, |_, _| rng.random_range(-1.0..1.0));
    let v = Matrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
    let targets = Arc::new(CeTargets::new(vec![0, 1, 2], vec![1.0, 1.0, 1.0]));
    let directional = |x: &Matrix| -> (f64, Matrix) {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let wv = t.leaf(w.clone());
        let h = t.matmul(xv, wv).unwrap();
        let h = t.sigmoid(h).unwrap();
        let h = t.pow(h, 2.0).unwrap();
        let loss = t.masked_cross_entropy(h, Arc::clone(&targets)).unwrap();
        let g = t.gradient(loss, &[xv]).unwrap()[0];
        let vv = t.leaf(v.clone());
        let gv = t.mul(g, vv).unwrap();
        let gv = t.sum_all(gv).unwrap();
        let hv = t.gradient(gv, &[xv]).unwrap()[0];
        (t.value(gv).item(), t.value(hv).clone())
    };
    let (_, hv) = directional(&x0);
    for idx in 0..x0.len() {
        let (mut p, mut q) = (x0.clone(), x0.clone());
        p.as_mut_slice()[idx] += EPS;
        q.as_mut_slice()[idx] -= EPS;
        let fd = (directional(&p).0 - directional(&q).0) / (2.0 * EPS);
        assert!(close(hv.as_slice()[idx], fd, 1e-5, 1e-9), "entry {idx}: {} vs {fd}", hv.as_slice()[idx]);
    }
}

#[test]
fn masked_cross_entropy_tight_check() {
    const EPS: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let z0 = Matrix::from_fn(5, 4, |_, _| rng.random_range(-2.0..2.0));
    let targets = Arc::new(CeTargets::new(vec![3, 0, 1, 2, 0], vec![0.2, 1.0, 0.0, 0.7, 1.3]));
    let eval = |z: &Matrix| {
        let mut t = Tape::new();
        let v = t.leaf(z.clone());
        let l = t.masked_cross_entropy(v, Arc::clone(&targets)).unwrap();
        let g = t.gradient(l, &[v]).unwrap()[0];
        (t.value(l).item(), t.value(g).clone())
    };
    let (_, g) = eval(&z0);
    for idx in 0..z0.len() {
        let (mut p, mut q) = (z0.clone(), z0.clone());
        p.as_mut_slice()[idx] += EPS;
        q.as_mut_slice()[idx] -= EPS;
        let fd = (eval(&p).0 - eval(&q).0) / (2.0 * EPS);
        let an = g.as_slice()[idx];
        assert!(close(an, fd, 1e-6, 1e-10), "entry {idx}: {an} vs {fd}");
    }
    // rows with zero weight get no gradient at all
    assert!(g.row(2).iter().all(|&x| x == 0.0));
}

#[test]
fn gradient_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x0 = Matrix::from_fn(3, 3, |_, _| rng.random_range(-2.0..2.0));
    let mut t = Tape::new();
    let x = t.leaf(x0);
    let f = t.sigmoid(x).unwrap();
    let f = t.sum_all(f).unwrap();
    let g = t.pow(x, 2.0).unwrap();
    let g = t.row_sums(g).unwrap();
    let g = t.sum_all(g).unwrap();
    let (a, b) = (0.7, -2.5);
    let fa = t.scale(f, a).unwrap();
    let gb = t.scale(g, b).unwrap();
    let combo = t.add(fa, gb).unwrap();
    let dc = t.gradient(combo, &[x]).unwrap()[0];
    let df = t.gradient(f, &[x]).unwrap()[0];
    let dg = t.gradient(g, &[x]).unwrap()[0];
    let expected = t.value(df).zip_map(t.value(dg), |p, q| a * p + b * q);
    for (u, w) in t.value(dc).as_slice().iter().zip(expected.as_slice()) {
        assert!(close(*u, *w, 1e-12, 1e-14));
    }
}

#[test]
fn constant_loss_has_zero_gradient() {
    let mut t = Tape::new();
    let x = t.leaf(Matrix::filled(2, 3, 0.4));
    let c = t.leaf(Matrix::filled(2, 3, 1.5));
    let e = t.exp(c).unwrap();
    let loss = t.sum_all(e).unwrap();
    let g = t.gradient(loss, &[x]).unwrap()[0];
    assert_eq!(t.value(g), &Matrix::zeros(2, 3));
}
