use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedF1 {
    pub value: f64,
    pub per_class: Vec<ClassScores>,
}

/// Per-class F1 averaged with true-label frequencies as weights. Classes
/// with `P + R = 0` score 0.
pub fn weighted_f1(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<WeightedF1> {
    if y_true.is_empty() {
        return Err(Error::Parameter("weighted F1 of an empty evaluation set".into()));
    }
    if y_true.len() != y_pred.len() {
        return Err(Error::Shape(format!(
            "{} true labels vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut tp = vec![0usize; classes];
    let mut predicted = vec![0usize; classes];
    let mut support = vec![0usize; classes];
    for (i, (&t, &p)) in y_true.iter().zip(y_pred).enumerate() {
        if t >= classes || p >= classes {
            return Err(Error::Parameter(format!(
                "label out of range for {classes} classes at row {i}"
            )));
        }
        support[t] += 1;
        predicted[p] += 1;
        if t == p {
            tp[t] += 1;
        }
    }
    let n = y_true.len() as f64;
    let mut value = 0.0;
    let per_class = (0..classes)
        .map(|c| {
            let precision = if predicted[c] == 0 { 0.0 } else { tp[c] as f64 / predicted[c] as f64 };
            let recall = if support[c] == 0 { 0.0 } else { tp[c] as f64 / support[c] as f64 };
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            value += f1 * support[c] as f64 / n;
            ClassScores {
                precision,
                recall,
                f1,
                support: support[c],
            }
        })
        .collect();
    Ok(WeightedF1 { value, per_class })
}

/// Whether `label` is among the `k` largest of `row`; ties rank the lower
/// class index first.
pub fn in_top_k(row: &[f64], label: usize, k: usize) -> bool {
    let target = row[label];
    let ahead = row
        .iter()
        .enumerate()
        .filter(|&(c, &v)| v > target || (v == target && c < label))
        .count();
    ahead < k
}

/// Fraction of rows whose true label is among the `k` largest logits.
pub fn topk_accuracy(logits: &[Vec<f64>], y_true: &[usize], k: usize) -> Result<f64> {
    if logits.is_empty() || logits.len() != y_true.len() {
        return Err(Error::Shape(format!(
            "{} logit rows vs {} labels",
            logits.len(),
            y_true.len()
        )));
    }
    let classes = logits[0].len();
    if k == 0 || k > classes {
        return Err(Error::Parameter(format!("k = {k} must lie in [1, {classes}]")));
    }
    let mut hits = 0;
    for (i, (row, &y)) in logits.iter().zip(y_true).enumerate() {
        if row.len() != classes || y >= classes {
            return Err(Error::Shape(format!("row {i} inconsistent with {classes} classes")));
        }
        if in_top_k(row, y, k) {
            hits += 1;
        }
    }
    Ok(hits as f64 / logits.len() as f64)
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Weighted F1, top-1 and top-3 on one evaluation set, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricBlock {
    pub weighted_f1: f64,
    pub top1: f64,
    pub top3: f64,
    pub per_class: Vec<ClassScores>,
}

impl MetricBlock {
    pub fn compute(logits: &[Vec<f64>], y_true: &[usize]) -> Result<Self> {
        let classes = logits.first().map(Vec::len).unwrap_or(0);
        let preds: Vec<usize> = logits.iter().map(|r| argmax(r)).collect();
        let f1 = weighted_f1(y_true, &preds, classes)?;
        Ok(MetricBlock {
            weighted_f1: f1.value,
            top1: topk_accuracy(logits, y_true, 1)?,
            top3: topk_accuracy(logits, y_true, 3.min(classes))?,
            per_class: f1.per_class,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_hand_cases() {
        assert_eq!(weighted_f1(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap().value, 1.0);
        let r = weighted_f1(&[0, 0, 1], &[0, 1, 1], 2).unwrap();
        assert!((r.value - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.per_class[0].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.per_class[1].f1 - 2.0 / 3.0).abs() < 1e-12);
        let r = weighted_f1(&[0, 1, 2, 3], &[0, 0, 0, 0], 4).unwrap();
        assert!((r.value - 0.1).abs() < 1e-12);
    }

    #[test]
    fn f1_errors() {
        assert!(weighted_f1(&[], &[], 2).is_err());
        assert!(weighted_f1(&[2], &[0], 2).is_err());
    }

    #[test]
    fn topk_cases() {
        let logits = vec![vec![0.1, 0.5, 0.2], vec![0.3, 0.3, 0.3]];
        assert_eq!(topk_accuracy(&logits, &[0, 2], 3).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&logits, &[1, 0], 1).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&logits, &[1, 2], 1).unwrap(), 0.5);
        assert!(topk_accuracy(&logits, &[1, 2], 4).is_err());
    }
}
