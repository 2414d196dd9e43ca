//! Classification and clustering quality measures.

use itertools::Itertools;

use crate::error::{Error, Result};

/// `K×K` counts, rows are true classes and columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_predictions(classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::DimensionMismatch {
                expected: truth.len(),
                found: predicted.len(),
            });
        }
        let mut m = Self::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= classes || p >= classes {
                return Err(Error::LabelOutOfRange {
                    label: t.max(p),
                    classes,
                });
            }
            m.counts[t][p] += 1;
        }
        Ok(m)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|k| self.counts[k][k]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }
}

pub fn accuracy(truth: &[usize], predicted: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    truth.iter().zip(predicted).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn contingency(a: &[usize], b: &[usize]) -> (Vec<Vec<f64>>, usize, usize) {
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut t = vec![vec![0.0; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        t[x][y] += 1.0;
    }
    (t, ka, kb)
}

/// Normalized mutual information `I(a;b) / sqrt(H(a)·H(b))`; 1 when both
/// labelings are constant and identical up to renaming.
pub fn nmi(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    if a.is_empty() {
        return 0.0;
    }
    let (t, ka, kb) = contingency(a, b);
    let pa: Vec<f64> = (0..ka).map(|i| t[i].iter().sum::<f64>() / n).collect();
    let pb: Vec<f64> = (0..kb)
        .map(|j| (0..ka).map(|i| t[i][j]).sum::<f64>() / n)
        .collect();
    let h = |p: &[f64]| {
        -p.iter()
            .filter(|&&v| v > 0.0)
            .map(|v| v * v.ln())
            .sum::<f64>()
    };
    let (ha, hb) = (h(&pa), h(&pb));
    let mut mi = 0.0;
    for i in 0..ka {
        for j in 0..kb {
            let pij = t[i][j] / n;
            if pij > 0.0 {
                mi += pij * (pij / (pa[i] * pb[j])).ln();
            }
        }
    }
    if ha == 0.0 && hb == 0.0 {
        return 1.0;
    }
    if ha == 0.0 || hb == 0.0 {
        return 0.0;
    }
    (mi / (ha * hb).sqrt()).clamp(0.0, 1.0)
}

/// Accuracy of `predicted` against `truth` under the best one-to-one
/// relabeling of the predicted ids (exhaustive over permutations).
pub fn matched_accuracy(truth: &[usize], predicted: &[usize]) -> Result<f64> {
    if truth.len() != predicted.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            found: predicted.len(),
        });
    }
    if truth.is_empty() {
        return Ok(0.0);
    }
    let (t, kp, kt) = contingency(predicted, truth);
    let k = kp.max(kt);
    if k > 9 {
        return Err(Error::InvalidDimension(format!(
            "matched accuracy supports at most 9 labels, got {k}"
        )));
    }
    let cell = |p: usize, q: usize| if p < kp && q < kt { t[p][q] } else { 0.0 };
    let best = (0..k)
        .permutations(k)
        .map(|perm| {
            perm.iter()
                .enumerate()
                .map(|(p, &q)| cell(p, q))
                .sum::<f64>()
        })
        .fold(0.0, f64::max);
    Ok(best / truth.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_predictor() {
        let truth = [0, 1, 2, 0, 1];
        let pred = [0; 5];
        let m = ConfusionMatrix::from_predictions(3, &truth, &pred).unwrap();
        assert_eq!(m.accuracy(), 0.4);
        assert_eq!(m.counts.iter().map(|r| r[0]).sum::<u64>(), 5);
        assert_eq!(m.trace() as f64 / m.total() as f64, accuracy(&truth, &pred));
    }

    #[test]
    fn relabeling_is_free() {
        let truth = [0, 0, 1, 1, 2, 2];
        let pred = [2, 2, 0, 0, 1, 1];
        assert_eq!(matched_accuracy(&truth, &pred).unwrap(), 1.0);
        assert!((nmi(&truth, &pred) - 1.0).abs() < 1e-12);
        let noisy = [2, 2, 0, 1, 1, 1];
        assert!((matched_accuracy(&truth, &noisy).unwrap() - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn independent_labelings_have_zero_nmi() {
        let a = [0, 0, 1, 1];
        let b = [0, 1, 0, 1];
        assert!(nmi(&a, &b).abs() < 1e-12);
    }
}
