//! Symmetric-normalized propagation `D^-1/2 (A + I) D^-1/2 h`.
//!
//! The dense form materializes the adjacency. The block form keeps the
//! original adjacency as a constant sparse operator and only the injected
//! rows `[A_inter | A_intra]` as differentiable dense blocks, so a step costs
//! O(E + mn) per feature column instead of O((n + m)^2).

use std::sync::Arc;

use crate::engine::{CsrMatrix, Matrix, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
enum Adjacency {
    Dense(Var),
    Blocks { base: Arc<CsrMatrix>, inter: Var, intra: Var },
}

/// Normalized adjacency operator recorded on a tape.
#[derive(Clone, Debug)]
pub struct Propagator {
    adj: Adjacency,
    inv_sqrt_deg: Var,
}

fn check_degrees(tape: &Tape, deg: Var) -> Result<()> {
    match tape.value(deg).as_slice().iter().position(|&d| d <= 0.0) {
        Some(i) => Err(Error::invalid(format!("row {i} of A + I has non-positive degree"))),
        None => Ok(()),
    }
}

impl Propagator {
    /// From a dense square raw adjacency without self-loops.
    pub fn dense(tape: &mut Tape, raw: Var) -> Result<Self> {
        if raw.rows() != raw.cols() {
            return Err(Error::Shape(format!("adjacency is {}x{}", raw.rows(), raw.cols())));
        }
        let one = tape.scalar(1.0);
        let rs = tape.row_sums(raw)?;
        let deg = tape.add(rs, one)?;
        check_degrees(tape, deg)?;
        let inv_sqrt_deg = tape.pow(deg, -0.5)?;
        Ok(Self { adj: Adjacency::Dense(raw), inv_sqrt_deg })
    }

    /// From the constant original adjacency plus injected blocks
    /// (`inter`: m x n, `intra`: m x m).
    pub fn blocks(tape: &mut Tape, base: &Arc<CsrMatrix>, inter: Var, intra: Var) -> Result<Self> {
        let n = base.rows();
        let m = inter.rows();
        if base.cols() != n || inter.cols() != n || intra.shape() != (m, m) {
            return Err(Error::Shape(format!(
                "base {}x{}, inter {:?}, intra {:?}",
                base.rows(),
                base.cols(),
                inter.shape(),
                intra.shape()
            )));
        }
        let base_deg = Matrix::from_vec(n, 1, base.row_sums().into_iter().map(|d| d + 1.0).collect());
        let base_deg = tape.leaf(base_deg);
        let deg = if m == 0 {
            base_deg
        } else {
            let cs = tape.column_sums(inter)?;
            let cs = tape.transpose(cs)?;
            let deg_o = tape.add(base_deg, cs)?;
            let ri = tape.row_sums(inter)?;
            let ra = tape.row_sums(intra)?;
            let s = tape.add(ri, ra)?;
            let one = tape.scalar(1.0);
            let deg_i = tape.add(s, one)?;
            tape.stack_rows(deg_o, deg_i)?
        };
        check_degrees(tape, deg)?;
        let inv_sqrt_deg = tape.pow(deg, -0.5)?;
        Ok(Self { adj: Adjacency::Blocks { base: Arc::clone(base), inter, intra }, inv_sqrt_deg })
    }

    /// Total node count the operator acts on.
    pub fn size(&self) -> usize {
        self.inv_sqrt_deg.rows()
    }

    /// `D^-1/2` as an N x 1 column.
    pub fn inv_sqrt_degree(&self) -> Var {
        self.inv_sqrt_deg
    }

    /// `Â h`.
    pub fn apply(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        if h.rows() != self.size() {
            return Err(Error::Shape(format!("propagating {:?} over {} nodes", h.shape(), self.size())));
        }
        let k = tape.mul(self.inv_sqrt_deg, h)?;
        let ak = match &self.adj {
            Adjacency::Dense(a) => tape.matmul(*a, k)?,
            Adjacency::Blocks { base, inter, intra } => {
                let n = base.rows();
                let m = inter.rows();
                if m == 0 {
                    tape.sparse_matmul(base, k)?
                } else {
                    let c = h.cols();
                    let ko = tape.slice(k, 0, 0, n, c)?;
                    let ki = tape.slice(k, n, 0, m, c)?;
                    let so = tape.sparse_matmul(base, ko)?;
                    let ti = tape.matmul_t(*inter, true, ki, false)?;
                    let top = tape.add(so, ti)?;
                    let io = tape.matmul(*inter, ko)?;
                    let ii = tape.matmul(*intra, ki)?;
                    let bottom = tape.add(io, ii)?;
                    tape.stack_rows(top, bottom)?
                }
            }
        };
        let sum = tape.add(ak, k)?;
        Ok(tape.mul(self.inv_sqrt_deg, sum)?)
    }
}

/// Explicit `Â` for a dense raw adjacency.
pub fn normalize_adjacency(tape: &mut Tape, raw: Var) -> Result<Var> {
    let p = Propagator::dense(tape, raw)?;
    let eye = tape.leaf(Matrix::identity(raw.rows()));
    let with_loops = tape.add(raw, eye)?;
    let left = tape.mul(p.inv_sqrt_deg, with_loops)?;
    let right = tape.transpose(p.inv_sqrt_deg)?;
    Ok(tape.mul(left, right)?)
}

/// Node features recorded on a tape.
#[derive(Clone, Debug)]
pub enum Features {
    Dense(Var),
    /// Constant original rows stacked over differentiable injected rows.
    Blocks {
        base: Arc<CsrMatrix>,
        injected: Var,
    },
}

impl Features {
    pub fn rows(&self) -> usize {
        match self {
            Features::Dense(x) => x.rows(),
            Features::Blocks { base, injected } => base.rows() + injected.rows(),
        }
    }

    /// `X W`.
    pub fn project(&self, tape: &mut Tape, w: Var) -> Result<Var> {
        match self {
            Features::Dense(x) => Ok(tape.matmul(*x, w)?),
            Features::Blocks { base, injected } => {
                let top = tape.sparse_matmul(base, w)?;
                if injected.rows() == 0 {
                    return Ok(top);
                }
                let bottom = tape.matmul(*injected, w)?;
                Ok(tape.stack_rows(top, bottom)?)
            }
        }
    }
}

/// Everything a model forward pass needs from the graph.
#[derive(Clone, Debug)]
pub struct GraphVars {
    pub prop: Propagator,
    pub features: Features,
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;

    use super::*;

    #[test]
    fn single_node() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::zeros(1, 1));
        let n = normalize_adjacency(&mut t, a).unwrap();
        assert_eq!(t.value(n).as_slice(), &[1.0]);
    }

    #[test]
    fn single_edge() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]));
        let n = normalize_adjacency(&mut t, a).unwrap();
        for &v in t.value(n).as_slice() {
            assert_relative_eq!(v, 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn negative_degree_rejected() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::from_rows(&[vec![0.0, -3.0], vec![-3.0, 0.0]]));
        assert!(normalize_adjacency(&mut t, a).is_err());
    }

    #[test]
    fn apply_matches_explicit() {
        let raw = Matrix::from_fn(5, 5, |i, j| if i == j { 0.0 } else { ((i * j) % 3) as f64 * 0.4 });
        let raw = raw.zip_map(&raw.transpose(), |a, b| a + b);
        let h = Matrix::from_fn(5, 2, |i, j| i as f64 - j as f64);
        let mut t = Tape::new();
        let a = t.leaf(raw);
        let hv = t.leaf(h.clone());
        let p = Propagator::dense(&mut t, a).unwrap();
        let out = p.apply(&mut t, hv).unwrap();
        let norm = normalize_adjacency(&mut t, a).unwrap();
        let expect = t.value(norm).matmul(&h);
        for (x, y) in t.value(out).as_slice().iter().zip(expect.as_slice()) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }
}
