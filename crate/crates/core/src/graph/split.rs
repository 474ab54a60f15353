use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Labeled/unlabeled partition of the node set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    labeled: Vec<bool>,
}

impl Split {
    pub fn from_mask(labeled: Vec<bool>) -> Self {
        Self { labeled }
    }

    pub fn n(&self) -> usize {
        self.labeled.len()
    }

    pub fn mask(&self) -> &[bool] {
        &self.labeled
    }

    pub fn is_labeled(&self, v: usize) -> bool {
        self.labeled[v]
    }

    pub fn labeled_nodes(&self) -> Vec<usize> {
        (0..self.n()).filter(|&v| self.labeled[v]).collect()
    }

    pub fn unlabeled_nodes(&self) -> Vec<usize> {
        (0..self.n()).filter(|&v| !self.labeled[v]).collect()
    }
}

/// Random split with `round(train_fraction * n)` labeled nodes.
pub fn split_nodes(n: usize, train_fraction: f64, seed: u64) -> Result<Split> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!("train fraction {train_fraction} not in (0, 1)")));
    }
    let count = (train_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut labeled = vec![false; n];
    for &v in &order[..count] {
        labeled[v] = true;
    }
    Ok(Split { labeled })
}
