//! Accuracy and intersection-over-union accumulated over streamed points.

use serde::Serialize;

use crate::error::{Error, Result};

/// Point-level confusion counts, `counts[true][pred]`.
#[derive(Debug, Clone)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<usize>>,
    n_classes: usize,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; n_classes]; n_classes],
            n_classes,
        }
    }

    pub fn record(&mut self, pred: &[usize], truth: &[usize]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::contract("prediction/label length mismatch"));
        }
        for (&p, &y) in pred.iter().zip(truth) {
            if p >= self.n_classes || y >= self.n_classes {
                return Err(Error::contract("label out of range"));
            }
            self.counts[y][p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().map(|r| r.iter().sum::<usize>()).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let correct: usize = (0..self.n_classes).map(|k| self.counts[k][k]).sum();
        correct as f64 / self.total().max(1) as f64
    }

    /// Per-class IoU. Classes absent from both prediction and truth
    /// (TP + FP + FN == 0) report `None` and are excluded from the mean.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.n_classes)
            .map(|k| {
                let tp = self.counts[k][k];
                let fn_: usize = (0..self.n_classes)
                    .filter(|&c| c != k)
                    .map(|c| self.counts[k][c])
                    .sum();
                let fp: usize = (0..self.n_classes)
                    .filter(|&c| c != k)
                    .map(|c| self.counts[c][k])
                    .sum();
                let denom = tp + fp + fn_;
                if denom == 0 {
                    None
                } else {
                    Some(tp as f64 / denom as f64)
                }
            })
            .collect()
    }

    pub fn miou(&self) -> f64 {
        let ious = self.per_class_iou();
        let present: Vec<f64> = ious.into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}

/// Per-class IoU and their mean for one prediction/label pair.
pub fn compute_miou(
    pred: &[usize],
    truth: &[usize],
    n_classes: usize,
) -> Result<(Vec<Option<f64>>, f64)> {
    if pred.is_empty() {
        return Err(Error::contract("compute_miou needs at least one point"));
    }
    let mut cm = ConfusionMatrix::new(n_classes);
    cm.record(pred, truth)?;
    Ok((cm.per_class_iou(), cm.miou()))
}

/// Metrics of one segment (or of the whole run, with `index == None`).
#[derive(Debug, Clone, Serialize)]
pub struct SegmentMetrics {
    pub index: Option<usize>,
    pub name: String,
    pub n_points: usize,
    pub accuracy: f64,
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    /// Accuracy of the non-headline evaluation output.
    pub alt_accuracy: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn perfect_prediction_scores_one() {
        let labels = vec![0, 1, 2, 1, 0, 2];
        let (ious, miou) = compute_miou(&labels, &labels, 3).unwrap();
        assert!(ious.iter().all(|i| i == &Some(1.0)));
        assert!((miou - 1.0).abs() < 1e-15);
    }

    #[test]
    fn hand_arithmetic_case() {
        // Prediction all class 0; truth half 0, half 1.
        let pred = vec![0, 0, 0, 0];
        let truth = vec![0, 0, 1, 1];
        let (ious, miou) = compute_miou(&pred, &truth, 3).unwrap();
        assert_eq!(ious[0], Some(0.5));
        assert_eq!(ious[1], Some(0.0));
        assert_eq!(ious[2], None);
        assert!((miou - 0.25).abs() < 1e-15);
    }

    #[test]
    fn empty_input_is_error() {
        assert!(compute_miou(&[], &[], 3).is_err());
    }

    #[test]
    fn matches_naive_confusion_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let n = 500;
        let n_c = 4;
        let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n_c)).collect();
        let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n_c)).collect();
        let (ious, miou) = compute_miou(&pred, &truth, n_c).unwrap();

        // Independent scalar recount.
        for k in 0..n_c {
            let tp = pred
                .iter()
                .zip(&truth)
                .filter(|(p, y)| **p == k && **y == k)
                .count();
            let fp = pred
                .iter()
                .zip(&truth)
                .filter(|(p, y)| **p == k && **y != k)
                .count();
            let fn_ = pred
                .iter()
                .zip(&truth)
                .filter(|(p, y)| **p != k && **y == k)
                .count();
            let expect = tp as f64 / (tp + fp + fn_) as f64;
            assert_eq!(ious[k], Some(expect));
        }
        let mean: f64 =
            ious.iter().flatten().sum::<f64>() / ious.iter().flatten().count() as f64;
        assert!((miou - mean).abs() < 1e-15);
    }

    #[test]
    fn accuracy_and_merge() {
        let mut a = ConfusionMatrix::new(2);
        a.record(&[0, 1], &[0, 0]).unwrap();
        let mut b = ConfusionMatrix::new(2);
        b.record(&[1, 1], &[1, 1]).unwrap();
        a.merge(&b);
        assert_eq!(a.total(), 4);
        assert!((a.accuracy() - 0.75).abs() < 1e-15);
    }
}
