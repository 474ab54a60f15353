//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! Gradients are recorded on the same [`Tape`] as the forward pass, which is
//! what lets the attack differentiate through an unlearning step that is
//! itself a gradient.

mod matrix;
mod tape;

pub use matrix::{CsrMatrix, Matrix};
pub use tape::{CeTargets, OpKind, Tape, Var};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("{kind:?}: incompatible shapes {shapes:?}")]
    Shape { kind: OpKind, shapes: Vec<(usize, usize)> },
    #[error("{kind:?} produced a non-finite value")]
    NonFinite { kind: OpKind },
    #[error("gradient needs a 1x1 loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("{kind:?}: {msg}")]
    Invalid { kind: OpKind, msg: String },
}
