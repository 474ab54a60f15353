//! Injection attacks: heuristic baselines and the bi-level optimizer.

mod baselines;
mod optimize;
mod projection;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use baselines::{baseline_inject, BaselineKind};
pub use optimize::{
    attack_loss, optim_attack, AttackConfig, AttackLoss, AttackOutcome, AttackProblem, AttackState, LossOptions,
};
pub use projection::{project_top_b, top_b_indices};

/// Uniform sample of `size` nodes from `labeled` minus `exclude`, sorted.
pub fn sample_benign_set(labeled: &[usize], exclude: &[usize], size: usize, seed: u64) -> Result<Vec<usize>> {
    let pool: Vec<usize> = labeled.iter().copied().filter(|v| !exclude.contains(v)).collect();
    if size > pool.len() {
        return Err(Error::invalid(format!("benign set of {size} requested from {} eligible nodes", pool.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<usize> = sample(&mut rng, pool.len(), size).into_iter().map(|i| pool[i]).collect();
    out.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn benign_set_basics() {
        assert!(sample_benign_set(&[1, 2, 3], &[], 0, 0).unwrap().is_empty());
        let s = sample_benign_set(&[1, 2, 3, 4], &[2, 3], 2, 0).unwrap();
        assert_eq!(s, vec![1, 4]);
        assert!(sample_benign_set(&[1, 2], &[2], 2, 0).is_err());
        assert_eq!(
            sample_benign_set(&(0..50).collect::<Vec<_>>(), &[], 5, 9).unwrap(),
            sample_benign_set(&(0..50).collect::<Vec<_>>(), &[], 5, 9).unwrap()
        );
    }
}
