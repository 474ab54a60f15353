//! Append-only expression record with eager forward values.
//!
//! Every operation is pushed as a node holding its forward value. The
//! backward pass in [`Tape::gradient`] is itself built from recorded
//! operations, so a gradient can be differentiated again.

use std::sync::Arc;

use super::matrix::{CsrMatrix, Matrix};
use super::EngineError;

/// Handle to a node of a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

/// Primitive operation kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    SparseMatMul,
    Add,
    Subtract,
    Multiply,
    Divide,
    Scale,
    Power,
    Exp,
    Sigmoid,
    Relu,
    ReluBackward,
    LogSoftmaxRows,
    Sum,
    BroadcastTo,
    Transpose,
    RowSelect,
    RowScatter,
    Slice,
    Embed,
    Block2x2,
    StackRows,
    MaskedCrossEntropy,
    CrossEntropyBackward,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Reduce {
    All,
    /// Collapse rows, giving `1 x cols`.
    Rows,
    /// Collapse columns, giving `rows x 1`.
    Cols,
}

/// Per-row targets of a weighted cross-entropy: `sum_i w_i * CE(logits_i, label_i)`.
/// Rows with zero weight are skipped and their label is ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct CeTargets {
    labels: Vec<usize>,
    weights: Vec<f64>,
}

impl CeTargets {
    pub fn new(labels: Vec<usize>, weights: Vec<f64>) -> Self {
        assert_eq!(labels.len(), weights.len(), "labels and weights differ in length");
        Self { labels, weights }
    }

    /// Mean cross-entropy over `nodes`, scaled by `scale`, on a graph of `n` rows.
    pub fn mean_over(labels: &[usize], nodes: &[usize], scale: f64) -> Self {
        let mut weights = vec![0.0; labels.len()];
        if !nodes.is_empty() {
            let w = scale / nodes.len() as f64;
            for &v in nodes {
                weights[v] += w;
            }
        }
        Self { labels: labels.to_vec(), weights }
    }

    /// Adds the weights of `other`; both must carry identical labels on rows
    /// where both have non-zero weight.
    pub fn combine(mut self, other: &CeTargets) -> Self {
        assert_eq!(self.labels.len(), other.labels.len());
        for i in 0..self.labels.len() {
            if other.weights[i] != 0.0 {
                if self.weights[i] == 0.0 {
                    self.labels[i] = other.labels[i];
                } else {
                    assert_eq!(self.labels[i], other.labels[i], "conflicting labels on row {i}");
                }
                self.weights[i] += other.weights[i];
            }
        }
        self
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    SparseMatMul { op: Arc<CsrMatrix>, x: usize, transpose: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Pow(usize, f64),
    Exp(usize),
    Sigmoid(usize),
    Relu(usize),
    ReluBackward { x: usize, grad: usize },
    LogSoftmaxRows(usize),
    Sum(usize, Reduce),
    BroadcastTo(usize),
    Transpose(usize),
    RowSelect { a: usize, idx: Arc<Vec<usize>> },
    RowScatter { a: usize, idx: Arc<Vec<usize>> },
    Slice { a: usize, r0: usize, c0: usize },
    Embed { a: usize, r0: usize, c0: usize },
    Block2x2 { tl: usize, tr: usize, bl: usize, br: usize },
    StackRows(usize, usize),
    MaskedCe { logits: usize, targets: Arc<CeTargets> },
    CeBackward { logits: usize, grad: usize, targets: Arc<CeTargets> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::SparseMatMul { .. } => OpKind::SparseMatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Subtract,
            Op::Mul(..) => OpKind::Multiply,
            Op::Div(..) => OpKind::Divide,
            Op::Scale(..) => OpKind::Scale,
            Op::Pow(..) => OpKind::Power,
            Op::Exp(_) => OpKind::Exp,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Relu(_) => OpKind::Relu,
            Op::ReluBackward { .. } => OpKind::ReluBackward,
            Op::LogSoftmaxRows(_) => OpKind::LogSoftmaxRows,
            Op::Sum(..) => OpKind::Sum,
            Op::BroadcastTo(_) => OpKind::BroadcastTo,
            Op::Transpose(_) => OpKind::Transpose,
            Op::RowSelect { .. } => OpKind::RowSelect,
            Op::RowScatter { .. } => OpKind::RowScatter,
            Op::Slice { .. } => OpKind::Slice,
            Op::Embed { .. } => OpKind::Embed,
            Op::Block2x2 { .. } => OpKind::Block2x2,
            Op::StackRows(..) => OpKind::StackRows,
            Op::MaskedCe { .. } => OpKind::MaskedCrossEntropy,
            Op::CeBackward { .. } => OpKind::CrossEntropyBackward,
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::SparseMatMul { x, .. } => vec![*x],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::StackRows(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Pow(a, _)
            | Op::Exp(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::LogSoftmaxRows(a)
            | Op::Sum(a, _)
            | Op::BroadcastTo(a)
            | Op::Transpose(a)
            | Op::RowSelect { a, .. }
            | Op::RowScatter { a, .. }
            | Op::Slice { a, .. }
            | Op::Embed { a, .. } => vec![*a],
            Op::ReluBackward { x, grad } => vec![*x, *grad],
            Op::Block2x2 { tl, tr, bl, br } => vec![*tl, *tr, *bl, *br],
            Op::MaskedCe { logits, .. } => vec![*logits],
            Op::CeBackward { logits, grad, .. } => vec![*logits, *grad],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Matrix,
}

/// Expression record. Build one per evaluation; nodes are never removed.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    fn dim(x: usize, y: usize) -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    }
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

fn broadcast_zip(a: &Matrix, b: &Matrix, shape: (usize, usize), f: impl Fn(f64, f64) -> f64) -> Matrix {
    if a.shape() == shape && b.shape() == shape {
        return a.zip_map(b, f);
    }
    let (r, c) = shape;
    let pick = |m: &Matrix, i: usize, j: usize| {
        let ii = if m.rows() == 1 { 0 } else { i };
        let jj = if m.cols() == 1 { 0 } else { j };
        m.get(ii, jj)
    };
    Matrix::from_fn(r, c, |i, j| f(pick(a, i, j), pick(b, i, j)))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.id].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.id].op.kind()
    }

    fn var(&self, id: usize) -> Var {
        let (rows, cols) = self.nodes[id].value.shape();
        Var { id, rows, cols }
    }

    fn v(&self, id: usize) -> &Matrix {
        &self.nodes[id].value
    }

    /// Input tensor (parameter, constant, or data).
    pub fn leaf(&mut self, value: Matrix) -> Var {
        debug_assert!(value.is_finite(), "leaf with non-finite entries");
        self.nodes.push(Node { op: Op::Leaf, value });
        self.var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Matrix::scalar(value))
    }

    fn push(&mut self, op: Op) -> Result<Var, EngineError> {
        let value = self.eval(&op)?;
        if !value.is_finite() {
            return Err(EngineError::NonFinite { kind: op.kind() });
        }
        self.nodes.push(Node { op, value });
        Ok(self.var(self.nodes.len() - 1))
    }

    fn shape_err(&self, kind: OpKind, ids: &[usize]) -> EngineError {
        EngineError::Shape { kind, shapes: ids.iter().map(|&i| self.v(i).shape()).collect() }
    }

    /// Forward value of `op` from the cached values of its inputs.
    fn eval(&self, op: &Op) -> Result<Matrix, EngineError> {
        let kind = op.kind();
        Ok(match op {
            Op::Leaf => unreachable!("leaves carry their own values"),
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.v(*a), self.v(*b));
                let k1 = if *ta { va.rows() } else { va.cols() };
                let k2 = if *tb { vb.cols() } else { vb.rows() };
                if k1 != k2 {
                    return Err(self.shape_err(kind, &[*a, *b]));
                }
                Matrix::matmul_t(va, *ta, vb, *tb)
            }
            Op::SparseMatMul { op: s, x, transpose } => {
                let vx = self.v(*x);
                let inner = if *transpose { s.rows() } else { s.cols() };
                if inner != vx.rows() {
                    return Err(EngineError::Shape { kind, shapes: vec![(s.rows(), s.cols()), vx.shape()] });
                }
                if *transpose {
                    s.mul_dense_transposed(vx)
                } else {
                    s.mul_dense(vx)
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                let (va, vb) = (self.v(*a), self.v(*b));
                let shape = broadcast_shape(va.shape(), vb.shape()).ok_or_else(|| self.shape_err(kind, &[*a, *b]))?;
                match op {
                    Op::Add(..) => broadcast_zip(va, vb, shape, |x, y| x + y),
                    Op::Sub(..) => broadcast_zip(va, vb, shape, |x, y| x - y),
                    Op::Mul(..) => broadcast_zip(va, vb, shape, |x, y| x * y),
                    _ => broadcast_zip(va, vb, shape, |x, y| x / y),
                }
            }
            Op::Scale(a, s) => self.v(*a).map(|x| x * s),
            Op::Pow(a, p) => {
                let p = *p;
                self.v(*a).map(|x| x.powf(p))
            }
            Op::Exp(a) => self.v(*a).map(f64::exp),
            Op::Sigmoid(a) => self.v(*a).map(sigmoid),
            Op::Relu(a) => self.v(*a).map(|x| if x > 0.0 { x } else { 0.0 }),
            Op::ReluBackward { x, grad } => {
                let (vx, vg) = (self.v(*x), self.v(*grad));
                if vx.shape() != vg.shape() {
                    return Err(self.shape_err(kind, &[*x, *grad]));
                }
                vx.zip_map(vg, |x, g| if x > 0.0 { g } else { 0.0 })
            }
            Op::LogSoftmaxRows(a) => log_softmax_rows(self.v(*a)),
            Op::Sum(a, how) => {
                let va = self.v(*a);
                match how {
                    Reduce::All => Matrix::scalar(va.sum()),
                    Reduce::Rows => {
                        let mut out = Matrix::zeros(1, va.cols());
                        for i in 0..va.rows() {
                            for (o, &x) in out.as_mut_slice().iter_mut().zip(va.row(i)) {
                                *o += x;
                            }
                        }
                        out
                    }
                    Reduce::Cols => {
                        Matrix::from_vec(va.rows(), 1, (0..va.rows()).map(|i| va.row(i).iter().sum()).collect())
                    }
                }
            }
            Op::BroadcastTo(_) => unreachable!("broadcast_to evaluates in its builder"),
            Op::Transpose(a) => self.v(*a).transpose(),
            Op::RowSelect { a, idx } => {
                let va = self.v(*a);
                if idx.iter().any(|&i| i >= va.rows()) {
                    return Err(EngineError::Invalid {
                        kind,
                        msg: format!("row index out of range for {} rows", va.rows()),
                    });
                }
                va.select_rows(idx)
            }
            Op::RowScatter { .. } => unreachable!("row_scatter evaluates in its builder"),
            Op::Slice { .. } | Op::Embed { .. } => unreachable!("slice/embed evaluate in their builders"),
            Op::Block2x2 { tl, tr, bl, br } => {
                let (a, b, c, d) = (self.v(*tl), self.v(*tr), self.v(*bl), self.v(*br));
                if a.rows() != b.rows() || c.rows() != d.rows() || a.cols() != c.cols() || b.cols() != d.cols() {
                    return Err(self.shape_err(kind, &[*tl, *tr, *bl, *br]));
                }
                let mut out = Matrix::zeros(a.rows() + c.rows(), a.cols() + b.cols());
                out.paste(0, 0, a);
                out.paste(0, a.cols(), b);
                out.paste(a.rows(), 0, c);
                out.paste(a.rows(), a.cols(), d);
                out
            }
            Op::StackRows(a, b) => {
                let (va, vb) = (self.v(*a), self.v(*b));
                if va.cols() != vb.cols() {
                    return Err(self.shape_err(kind, &[*a, *b]));
                }
                let mut data = Vec::with_capacity(va.len() + vb.len());
                data.extend_from_slice(va.as_slice());
                data.extend_from_slice(vb.as_slice());
                Matrix::from_vec(va.rows() + vb.rows(), va.cols(), data)
            }
            Op::MaskedCe { logits, targets } => {
                let z = self.v(*logits);
                self.check_targets(kind, z, targets)?;
                let mut total = 0.0;
                for i in 0..z.rows() {
                    let w = targets.weights[i];
                    if w == 0.0 {
                        continue;
                    }
                    let row = z.row(i);
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    total += w * (lse - row[targets.labels[i]]);
                }
                Matrix::scalar(total)
            }
            Op::CeBackward { logits, grad, targets } => {
                let z = self.v(*logits);
                let g = self.v(*grad);
                if g.shape() != (1, 1) {
                    return Err(self.shape_err(kind, &[*logits, *grad]));
                }
                self.check_targets(kind, z, targets)?;
                let g = g.item();
                let mut out = Matrix::zeros(z.rows(), z.cols());
                for i in 0..z.rows() {
                    let w = targets.weights[i];
                    if w == 0.0 {
                        continue;
                    }
                    let row = z.row(i);
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    let scale = g * w;
                    let orow = out.row_mut(i);
                    for (j, o) in orow.iter_mut().enumerate() {
                        *o = scale * ((row[j] - max).exp() / denom);
                    }
                    orow[targets.labels[i]] -= scale;
                }
                out
            }
        })
    }

    fn check_targets(&self, kind: OpKind, z: &Matrix, t: &CeTargets) -> Result<(), EngineError> {
        if t.labels.len() != z.rows() {
            return Err(EngineError::Shape { kind, shapes: vec![z.shape(), (t.labels.len(), 1)] });
        }
        for i in 0..z.rows() {
            if t.weights[i] != 0.0 && t.labels[i] >= z.cols() {
                return Err(EngineError::Invalid {
                    kind,
                    msg: format!("label {} on row {i} exceeds class count {}", t.labels[i], z.cols()),
                });
            }
        }
        Ok(())
    }

    // ---- builders ------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) * op(b)`; transposition never materializes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var, EngineError> {
        self.push(Op::MatMul { a: a.id, b: b.id, ta, tb })
    }

    /// `s * x` with a constant sparse `s`.
    pub fn sparse_matmul(&mut self, s: &Arc<CsrMatrix>, x: Var) -> Result<Var, EngineError> {
        self.push(Op::SparseMatMul { op: Arc::clone(s), x: x.id, transpose: false })
    }

    /// `s^T * x` with a constant sparse `s`.
    pub fn sparse_matmul_transposed(&mut self, s: &Arc<CsrMatrix>, x: Var) -> Result<Var, EngineError> {
        self.push(Op::SparseMatMul { op: Arc::clone(s), x: x.id, transpose: true })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.push(Op::Add(a.id, b.id))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.push(Op::Sub(a.id, b.id))
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.push(Op::Mul(a.id, b.id))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.push(Op::Div(a.id, b.id))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, EngineError> {
        self.push(Op::Scale(a.id, s))
    }

    /// Elementwise `a^p`.
    pub fn pow(&mut self, a: Var, p: f64) -> Result<Var, EngineError> {
        self.push(Op::Pow(a.id, p))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, EngineError> {
        self.push(Op::Exp(a.id))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, EngineError> {
        self.push(Op::Sigmoid(a.id))
    }

    /// Rectifier; its derivative at exactly zero is taken as zero.
    pub fn relu(&mut self, a: Var) -> Result<Var, EngineError> {
        self.push(Op::Relu(a.id))
    }

    fn relu_backward(&mut self, x: usize, grad: Var) -> Result<Var, EngineError> {
        self.push(Op::ReluBackward { x, grad: grad.id })
    }

    /// Max-shifted row-wise log-softmax.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var, EngineError> {
        self.push(Op::LogSoftmaxRows(a.id))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var, EngineError> {
        self.push(Op::Sum(a.id, Reduce::All))
    }

    /// Sum down each column: `rows x cols -> 1 x cols`.
    pub fn column_sums(&mut self, a: Var) -> Result<Var, EngineError> {
        self.push(Op::Sum(a.id, Reduce::Rows))
    }

    /// Sum along each row: `rows x cols -> rows x 1`.
    pub fn row_sums(&mut self, a: Var) -> Result<Var, EngineError> {
        self.push(Op::Sum(a.id, Reduce::Cols))
    }

    pub fn broadcast_to(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, EngineError> {
        let va = self.v(a.id);
        if broadcast_shape(va.shape(), (rows, cols)) != Some((rows, cols)) {
            return Err(EngineError::Shape { kind: OpKind::BroadcastTo, shapes: vec![va.shape(), (rows, cols)] });
        }
        let value = broadcast_zip(va, &Matrix::zeros(rows, cols), (rows, cols), |x, _| x);
        self.nodes.push(Node { op: Op::BroadcastTo(a.id), value });
        Ok(self.var(self.nodes.len() - 1))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, EngineError> {
        self.push(Op::Transpose(a.id))
    }

    pub fn row_select(&mut self, a: Var, idx: &[usize]) -> Result<Var, EngineError> {
        self.row_select_shared(a, Arc::new(idx.to_vec()))
    }

    fn row_select_shared(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Result<Var, EngineError> {
        self.push(Op::RowSelect { a: a.id, idx })
    }

    /// Adjoint of [`Tape::row_select`]: scatter-adds rows of `a` into a `rows`-row zero matrix.
    pub fn row_scatter(&mut self, a: Var, idx: &[usize], rows: usize) -> Result<Var, EngineError> {
        self.row_scatter_shared(a, Arc::new(idx.to_vec()), rows)
    }

    fn row_scatter_shared(&mut self, a: Var, idx: Arc<Vec<usize>>, rows: usize) -> Result<Var, EngineError> {
        let va = self.v(a.id);
        if idx.len() != va.rows() || idx.iter().any(|&i| i >= rows) {
            return Err(EngineError::Invalid {
                kind: OpKind::RowScatter,
                msg: format!("{} indices for {} rows into {rows}", idx.len(), va.rows()),
            });
        }
        let mut value = Matrix::zeros(rows, va.cols());
        for (k, &i) in idx.iter().enumerate() {
            for (o, &x) in value.row_mut(i).iter_mut().zip(va.row(k)) {
                *o += x;
            }
        }
        self.nodes.push(Node { op: Op::RowScatter { a: a.id, idx }, value });
        Ok(self.var(self.nodes.len() - 1))
    }

    pub fn slice(&mut self, a: Var, r0: usize, c0: usize, rows: usize, cols: usize) -> Result<Var, EngineError> {
        let va = self.v(a.id);
        if r0 + rows > va.rows() || c0 + cols > va.cols() {
            return Err(EngineError::Shape { kind: OpKind::Slice, shapes: vec![va.shape(), (r0 + rows, c0 + cols)] });
        }
        let value = va.slice(r0, c0, rows, cols);
        self.nodes.push(Node { op: Op::Slice { a: a.id, r0, c0 }, value });
        Ok(self.var(self.nodes.len() - 1))
    }

    /// Places `a` at `(r0, c0)` inside a `rows x cols` zero matrix.
    pub fn embed(&mut self, a: Var, r0: usize, c0: usize, rows: usize, cols: usize) -> Result<Var, EngineError> {
        let va = self.v(a.id);
        if r0 + va.rows() > rows || c0 + va.cols() > cols {
            return Err(EngineError::Shape { kind: OpKind::Embed, shapes: vec![va.shape(), (rows, cols)] });
        }
        let mut value = Matrix::zeros(rows, cols);
        value.paste(r0, c0, va);
        self.nodes.push(Node { op: Op::Embed { a: a.id, r0, c0 }, value });
        Ok(self.var(self.nodes.len() - 1))
    }

    /// `[[tl, tr], [bl, br]]`.
    pub fn block2x2(&mut self, tl: Var, tr: Var, bl: Var, br: Var) -> Result<Var, EngineError> {
        self.push(Op::Block2x2 { tl: tl.id, tr: tr.id, bl: bl.id, br: br.id })
    }

    /// `[a; b]`.
    pub fn stack_rows(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.push(Op::StackRows(a.id, b.id))
    }

    /// `sum_i w_i * (logsumexp(z_i) - z_i[y_i])`, fused with its log-softmax.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: Arc<CeTargets>) -> Result<Var, EngineError> {
        self.push(Op::MaskedCe { logits: logits.id, targets })
    }

    fn ce_backward(&mut self, logits: usize, grad: Var, targets: Arc<CeTargets>) -> Result<Var, EngineError> {
        self.push(Op::CeBackward { logits, grad: grad.id, targets })
    }

    // ---- reverse mode --------------------------------------------------

    /// Reduces a broadcast gradient back to `shape`.
    fn sum_to(&mut self, g: Var, shape: (usize, usize)) -> Result<Var, EngineError> {
        let mut g = g;
        if g.rows != shape.0 {
            g = self.column_sums(g)?;
        }
        if g.cols != shape.1 {
            g = self.row_sums(g)?;
        }
        Ok(g)
    }

    /// Gradients of the scalar `loss` with respect to each of `wrt`.
    ///
    /// The backward pass is recorded on this tape, so the returned tensors
    /// can be fed into further computations and differentiated again.
    /// A `wrt` tensor that `loss` does not depend on gets an exact zero.
    pub fn gradient(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Var>, EngineError> {
        if loss.shape() != (1, 1) {
            return Err(EngineError::NonScalarLoss { rows: loss.rows, cols: loss.cols });
        }
        let top = loss.id;
        let mut relevant = vec![false; top + 1];
        for w in wrt {
            if w.id <= top {
                relevant[w.id] = true;
            }
        }
        for i in 0..=top {
            if !relevant[i] {
                relevant[i] = self.nodes[i].op.inputs().iter().any(|&j| relevant[j]);
            }
        }

        let mut grads: Vec<Option<Var>> = vec![None; top + 1];
        let mut found: Vec<Option<Var>> = vec![None; top + 1];
        if relevant[top] {
            grads[top] = Some(self.scalar(1.0));
        }
        for i in (0..=top).rev() {
            let Some(g) = grads[i].take() else { continue };
            found[i] = Some(g);
            let op = self.nodes[i].op.clone();
            for (input, contrib) in self.backward_rule(i, &op, g, &relevant)? {
                grads[input] = Some(match grads[input] {
                    Some(prev) => self.add(prev, contrib)?,
                    None => contrib,
                });
            }
        }

        wrt.iter()
            .map(|w| match found.get(w.id).copied().flatten() {
                Some(g) => Ok(g),
                None => Ok(self.leaf(Matrix::zeros(w.rows, w.cols))),
            })
            .collect()
    }

    fn backward_rule(
        &mut self,
        out: usize,
        op: &Op,
        g: Var,
        relevant: &[bool],
    ) -> Result<Vec<(usize, Var)>, EngineError> {
        let want = |i: usize| relevant[i];
        let mut res = Vec::new();
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.var(*a), self.var(*b));
                if want(*a) {
                    let da = match (ta, tb) {
                        (false, false) => self.matmul_t(g, false, bv, true)?,
                        (true, false) => self.matmul_t(bv, false, g, true)?,
                        (false, true) => self.matmul_t(g, false, bv, false)?,
                        (true, true) => self.matmul_t(bv, true, g, true)?,
                    };
                    res.push((*a, da));
                }
                if want(*b) {
                    let db = match (ta, tb) {
                        (false, false) => self.matmul_t(av, true, g, false)?,
                        (true, false) => self.matmul_t(av, false, g, false)?,
                        (false, true) => self.matmul_t(g, true, av, false)?,
                        (true, true) => self.matmul_t(g, true, av, true)?,
                    };
                    res.push((*b, db));
                }
            }
            Op::SparseMatMul { op: s, x, transpose } => {
                if want(*x) {
                    let dx = self.push(Op::SparseMatMul { op: Arc::clone(s), x: g.id, transpose: !transpose })?;
                    res.push((*x, dx));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let negate = matches!(op, Op::Sub(..));
                if want(*a) {
                    let shape = self.v(*a).shape();
                    res.push((*a, self.sum_to(g, shape)?));
                }
                if want(*b) {
                    let shape = self.v(*b).shape();
                    let gb = if negate { self.scale(g, -1.0)? } else { g };
                    res.push((*b, self.sum_to(gb, shape)?));
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    let t = self.mul(g, self.var(*b))?;
                    let shape = self.v(*a).shape();
                    res.push((*a, self.sum_to(t, shape)?));
                }
                if want(*b) {
                    let t = self.mul(g, self.var(*a))?;
                    let shape = self.v(*b).shape();
                    res.push((*b, self.sum_to(t, shape)?));
                }
            }
            Op::Div(a, b) => {
                let bv = self.var(*b);
                if want(*a) {
                    let t = self.div(g, bv)?;
                    let shape = self.v(*a).shape();
                    res.push((*a, self.sum_to(t, shape)?));
                }
                if want(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let t = self.mul(g, self.var(out))?;
                    let t = self.div(t, bv)?;
                    let t = self.scale(t, -1.0)?;
                    let shape = self.v(*b).shape();
                    res.push((*b, self.sum_to(t, shape)?));
                }
            }
            Op::Scale(a, s) => {
                if want(*a) {
                    res.push((*a, self.scale(g, *s)?));
                }
            }
            Op::Pow(a, p) => {
                if want(*a) {
                    let d = self.pow(self.var(*a), p - 1.0)?;
                    let d = self.scale(d, *p)?;
                    res.push((*a, self.mul(g, d)?));
                }
            }
            Op::Exp(a) => {
                if want(*a) {
                    res.push((*a, self.mul(g, self.var(out))?));
                }
            }
            Op::Sigmoid(a) => {
                if want(*a) {
                    let s = self.var(out);
                    let one = self.scalar(1.0);
                    let one_minus = self.sub(one, s)?;
                    let d = self.mul(s, one_minus)?;
                    res.push((*a, self.mul(g, d)?));
                }
            }
            Op::Relu(a) => {
                if want(*a) {
                    res.push((*a, self.relu_backward(*a, g)?));
                }
            }
            Op::ReluBackward { x, grad } => {
                // Piecewise constant in `x`.
                let _ = x;
                if want(*grad) {
                    res.push((*grad, self.relu_backward(*x, g)?));
                }
            }
            Op::LogSoftmaxRows(a) => {
                if want(*a) {
                    let p = self.exp(self.var(out))?;
                    let gs = self.row_sums(g)?;
                    let t = self.mul(p, gs)?;
                    res.push((*a, self.sub(g, t)?));
                }
            }
            Op::Sum(a, _) => {
                if want(*a) {
                    let (r, c) = self.v(*a).shape();
                    res.push((*a, self.broadcast_to(g, r, c)?));
                }
            }
            Op::BroadcastTo(a) => {
                if want(*a) {
                    let shape = self.v(*a).shape();
                    res.push((*a, self.sum_to(g, shape)?));
                }
            }
            Op::Transpose(a) => {
                if want(*a) {
                    res.push((*a, self.transpose(g)?));
                }
            }
            Op::RowSelect { a, idx } => {
                if want(*a) {
                    let rows = self.v(*a).rows();
                    res.push((*a, self.row_scatter_shared(g, Arc::clone(idx), rows)?));
                }
            }
            Op::RowScatter { a, idx } => {
                if want(*a) {
                    res.push((*a, self.row_select_shared(g, Arc::clone(idx))?));
                }
            }
            Op::Slice { a, r0, c0 } => {
                if want(*a) {
                    let (r, c) = self.v(*a).shape();
                    res.push((*a, self.embed(g, *r0, *c0, r, c)?));
                }
            }
            Op::Embed { a, r0, c0 } => {
                if want(*a) {
                    let (r, c) = self.v(*a).shape();
                    res.push((*a, self.slice(g, *r0, *c0, r, c)?));
                }
            }
            Op::Block2x2 { tl, tr, bl, br } => {
                let (r0, c0) = self.v(*tl).shape();
                for (id, ro, co) in [(*tl, 0, 0), (*tr, 0, c0), (*bl, r0, 0), (*br, r0, c0)] {
                    if want(id) {
                        let (r, c) = self.v(id).shape();
                        res.push((id, self.slice(g, ro, co, r, c)?));
                    }
                }
            }
            Op::StackRows(a, b) => {
                let ra = self.v(*a).rows();
                let cols = g.cols;
                if want(*a) {
                    res.push((*a, self.slice(g, 0, 0, ra, cols)?));
                }
                if want(*b) {
                    let rb = self.v(*b).rows();
                    res.push((*b, self.slice(g, ra, 0, rb, cols)?));
                }
            }
            Op::MaskedCe { logits, targets } => {
                if want(*logits) {
                    res.push((*logits, self.ce_backward(*logits, g, Arc::clone(targets))?));
                }
            }
            Op::CeBackward { logits, grad, targets } => {
                // value = grad * W (softmax(z) - onehot(y))
                if want(*grad) {
                    let one = self.scalar(1.0);
                    let unit = self.ce_backward(*logits, one, Arc::clone(targets))?;
                    let t = self.mul(unit, g)?;
                    res.push((*grad, self.sum_all(t)?));
                }
                if want(*logits) {
                    // grad * w_i * (p_i * u_i - p_i * <p_i, u_i>)
                    let lsm = self.log_softmax_rows(self.var(*logits))?;
                    let p = self.exp(lsm)?;
                    let pu = self.mul(p, g)?;
                    let s = self.row_sums(pu)?;
                    let ps = self.mul(p, s)?;
                    let hv = self.sub(pu, ps)?;
                    let w = self.leaf(Matrix::from_vec(targets.weights.len(), 1, targets.weights.clone()));
                    let hv = self.mul(hv, w)?;
                    res.push((*logits, self.mul(hv, self.var(*grad))?));
                }
            }
        }
        Ok(res)
    }

    /// Recomputes every non-leaf node from its inputs and checks it against
    /// the cached value, bit for bit.
    pub fn replay_matches(&self) -> bool {
        self.nodes.iter().enumerate().all(|(i, node)| {
            let inputs_precede = node.op.inputs().iter().all(|&j| j < i);
            let recomputed = match &node.op {
                Op::Leaf => return inputs_precede,
                Op::BroadcastTo(a) => {
                    let shape = node.value.shape();
                    broadcast_zip(self.v(*a), &Matrix::zeros(shape.0, shape.1), shape, |x, _| x)
                }
                Op::RowScatter { a, idx } => {
                    let va = self.v(*a);
                    let mut m = Matrix::zeros(node.value.rows(), va.cols());
                    for (k, &r) in idx.iter().enumerate() {
                        for (o, &x) in m.row_mut(r).iter_mut().zip(va.row(k)) {
                            *o += x;
                        }
                    }
                    m
                }
                Op::Slice { a, r0, c0 } => self.v(*a).slice(*r0, *c0, node.value.rows(), node.value.cols()),
                Op::Embed { a, r0, c0 } => {
                    let mut m = Matrix::zeros(node.value.rows(), node.value.cols());
                    m.paste(*r0, *c0, self.v(*a));
                    m
                }
                op => match self.eval(op) {
                    Ok(m) => m,
                    Err(_) => return false,
                },
            };
            inputs_precede
                && recomputed.shape() == node.value.shape()
                && recomputed.as_slice().iter().zip(node.value.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits())
        })
    }
}
