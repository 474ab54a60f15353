use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Accuracy and macro-F1 over `c` classes. A class with no true and no
/// predicted members scores an F1 of 0.
pub fn evaluate(predicted: &[usize], truth: &[usize], c: usize) -> Result<Metrics> {
    if predicted.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty node set"));
    }
    if predicted.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", predicted.len(), truth.len())));
    }
    let mut tp = vec![0usize; c];
    let mut pred_count = vec![0usize; c];
    let mut true_count = vec![0usize; c];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p >= c || t >= c {
            return Err(Error::invalid(format!("class index out of range for {c} classes")));
        }
        pred_count[p] += 1;
        true_count[t] += 1;
        if p == t {
            tp[p] += 1;
        }
    }
    let correct: usize = tp.iter().sum();
    let f1_sum: f64 = (0..c)
        .map(|k| {
            let denom = pred_count[k] + true_count[k];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[k] as f64 / denom as f64
            }
        })
        .sum();
    Ok(Metrics { accuracy: correct as f64 / predicted.len() as f64, macro_f1: f1_sum / c as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect() {
        let m = evaluate(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!((m.accuracy, m.macro_f1), (1.0, 1.0));
    }

    #[test]
    fn constant_prediction_on_balanced_pair() {
        let m = evaluate(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert!((m.macro_f1 - (2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn absent_class_counts_as_zero() {
        let m = evaluate(&[0, 1], &[0, 1], 3).unwrap();
        assert!((m.macro_f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_rejected() {
        assert!(evaluate(&[], &[], 2).is_err());
    }
}
