//! Graph unlearning corruption attacks.
//!
//! Injected nodes are crafted so that a GNN trained on the poisoned graph
//! behaves normally, while unlearning those nodes collapses its accuracy.

pub mod attack;
pub mod engine;
pub mod error;
pub mod graph;
pub mod harness;
pub mod models;
pub mod unlearning;

pub use error::{Error, Result};

/// Independent seed for a named sub-stream of `seed`.
pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    use rand::{RngCore, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}
