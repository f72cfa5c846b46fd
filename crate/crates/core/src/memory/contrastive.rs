//! Class-wise contrastive loss over momentum-queue contents.
//!
//! Anchors are confident target features of one class; positives are that
//! class's queue rows, negatives the same modality's other queues. Queue
//! entries are gradient constants; the returned gradient is with respect to
//! the anchors only.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::memory::queue::MomentumQueue;
use crate::numeric::exp_unit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveForm {
    /// Log-ratio form with the denominator over positives and negatives
    /// (supervised-contrastive style), temperature 1. The default.
    LogRatio,
    /// Ratio without the log, denominator over negatives only. Kept
    /// selectable so the two readings can be compared on equal footing.
    Literal,
}

impl Default for ContrastiveForm {
    fn default() -> Self {
        ContrastiveForm::LogRatio
    }
}

/// All queue rows of one modality stacked into a dense matrix, with the row
/// range each class occupies.
#[derive(Debug, Clone)]
pub struct QueueStack {
    pub matrix: Array2<f64>,
    pub class_ranges: Vec<std::ops::Range<usize>>,
}

impl QueueStack {
    pub fn from_queues(queues: &[MomentumQueue]) -> Self {
        let dim = queues.first().map_or(0, |q| q.feature_dim());
        let total: usize = queues.iter().map(|q| q.len()).sum();
        let mut matrix = Array2::zeros((total, dim));
        let mut class_ranges = Vec::with_capacity(queues.len());
        let mut at = 0;
        for q in queues {
            let next = at + q.len();
            matrix
                .slice_mut(ndarray::s![at..next, ..])
                .assign(&q.rows_storage());
            class_ranges.push(at..next);
            at = next;
        }
        QueueStack {
            matrix,
            class_ranges,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.class_ranges.len()
    }
}

/// Loss and anchor gradient for the anchors of one class.
pub fn class_contrastive(
    anchors: &ArrayView2<f64>,
    class_k: usize,
    stack: &QueueStack,
    form: ContrastiveForm,
) -> Result<(f64, Array2<f64>)> {
    let dim = stack.matrix.ncols();
    let a = anchors.nrows();
    if a == 0 {
        return Ok((0.0, Array2::zeros((0, dim))));
    }
    if anchors.ncols() != dim {
        return Err(Error::contract("anchor width does not match queue rows"));
    }
    if class_k >= stack.n_classes() {
        return Err(Error::contract(format!("class {class_k} out of range")));
    }
    let pos = stack.class_ranges[class_k].clone();
    let p_count = pos.len();
    if p_count == 0 {
        return Err(Error::contract("positive queue is empty"));
    }
    let total = stack.matrix.nrows();
    if total == p_count {
        return Err(Error::contract(
            "no negative queues: contrastive loss needs at least two classes",
        ));
    }

    // Similarities of every anchor against every stored row; inner products
    // of unit vectors, so exp_unit applies.
    let sims = anchors.dot(&stack.matrix.t());
    let mut exps = sims.clone();
    exps.mapv_inplace(exp_unit);
    let inv_p = 1.0 / p_count as f64;

    match form {
        ContrastiveForm::LogRatio => {
            let denom = exps.sum_axis(Axis(1));
            let mut loss = 0.0;
            for (i, row) in sims.rows().into_iter().enumerate() {
                let pos_mean: f64 = row.slice(ndarray::s![pos.clone()]).sum() * inv_p;
                loss += denom[i].ln() - pos_mean;
            }
            // grad_i = softmax_i . Q - mean(P)
            let mut weights = exps;
            for (mut row, &d) in weights.rows_mut().into_iter().zip(denom.iter()) {
                row.mapv_inplace(|v| v / d);
            }
            let mut grad = weights.dot(&stack.matrix);
            let mu_p = stack
                .matrix
                .slice(ndarray::s![pos, ..])
                .mean_axis(Axis(0))
                .expect("non-empty positives");
            for mut row in grad.rows_mut() {
                row.zip_mut_with(&mu_p, |g, &m| *g -= m);
            }
            Ok((loss, grad))
        }
        ContrastiveForm::Literal => {
            let pos_block = stack.matrix.slice(ndarray::s![pos.clone(), ..]);
            let exp_pos = exps.slice(ndarray::s![.., pos.clone()]);
            let e_p: Array1<f64> = exp_pos.sum_axis(Axis(1));
            let e_all: Array1<f64> = exps.sum_axis(Axis(1));
            let s_n = &e_all - &e_p;

            let v_all = exps.dot(&stack.matrix);
            let v_p = exp_pos.dot(&pos_block);
            let v_n = &v_all - &v_p;

            let mut loss = 0.0;
            let mut grad = Array2::zeros((a, dim));
            for i in 0..a {
                loss += -e_p[i] * inv_p / s_n[i];
                let s2 = s_n[i] * s_n[i];
                for d in 0..dim {
                    grad[[i, d]] = (e_p[i] * v_n[[i, d]] - s_n[i] * v_p[[i, d]]) * inv_p / s2;
                }
            }
            Ok((loss, grad))
        }
    }
}

/// Sums the per-class losses over every class with anchors, returning the
/// total and one gradient block per class.
pub fn total_contrastive(
    anchors_by_class: &[Array2<f64>],
    stack: &QueueStack,
    form: ContrastiveForm,
) -> Result<(f64, Vec<Array2<f64>>)> {
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(anchors_by_class.len());
    for (k, anchors) in anchors_by_class.iter().enumerate() {
        let (loss, grad) = class_contrastive(&anchors.view(), k, stack, form)?;
        total += loss;
        grads.push(grad);
    }
    Ok((total, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::centroid::{ClassCentroid, PseudoSourceBank};
    use crate::numeric::normalize_rows;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_stack(seed: u64, classes: usize, per_class: usize, dim: usize) -> QueueStack {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let queues: Vec<MomentumQueue> = (0..classes)
            .map(|k| {
                let c = ClassCentroid {
                    mu_src: ndarray::Array1::from_shape_fn(dim, |d| {
                        ((k * dim + d) as f64 * 0.7).sin()
                    }),
                    sigma_src: ndarray::Array1::from_elem(dim, 0.2),
                    live_mean: ndarray::Array1::zeros(dim),
                };
                let bank = PseudoSourceBank::sample(&c, per_class, &mut rng).unwrap();
                MomentumQueue::from_bank(&bank)
            })
            .collect();
        QueueStack::from_queues(&queues)
    }

    fn random_anchors(seed: u64, n: usize, dim: usize) -> Array2<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let raw = Array2::from_shape_fn((n, dim), |_| rng.gen_range(-1.0..1.0));
        normalize_rows(&raw.view(), 1e-12)
    }

    #[test]
    fn empty_anchor_set_is_zero() {
        let stack = random_stack(1, 3, 8, 4);
        let anchors = Array2::zeros((0, 4));
        for form in [ContrastiveForm::LogRatio, ContrastiveForm::Literal] {
            let (loss, grad) = class_contrastive(&anchors.view(), 0, &stack, form).unwrap();
            assert_eq!(loss, 0.0);
            assert_eq!(grad.nrows(), 0);
        }
    }

    #[test]
    fn single_class_world_is_rejected() {
        let stack = random_stack(2, 1, 8, 4);
        let anchors = random_anchors(3, 2, 4);
        assert!(
            class_contrastive(&anchors.view(), 0, &stack, ContrastiveForm::LogRatio).is_err()
        );
    }

    fn fd_check(form: ContrastiveForm, seed: u64) {
        let stack = random_stack(seed, 3, 6, 5);
        let anchors = random_anchors(seed + 100, 4, 5);
        let (_, grad) = class_contrastive(&anchors.view(), 1, &stack, form).unwrap();
        let eps = 1e-5;
        let mut max_rel: f64 = 0.0;
        for r in 0..4 {
            for d in 0..5 {
                let mut plus = anchors.clone();
                plus[[r, d]] += eps;
                let mut minus = anchors.clone();
                minus[[r, d]] -= eps;
                let (lp, _) = class_contrastive(&plus.view(), 1, &stack, form).unwrap();
                let (lm, _) = class_contrastive(&minus.view(), 1, &stack, form).unwrap();
                let num = (lp - lm) / (2.0 * eps);
                max_rel = max_rel.max(crate::numeric::rel_error(grad[[r, d]], num, 1e-6));
            }
        }
        assert!(max_rel < 1e-4, "{form:?} fd max rel err {max_rel:.3e}");
    }

    #[test]
    fn gradient_matches_finite_differences_log_form() {
        for seed in 0..5 {
            fd_check(ContrastiveForm::LogRatio, 10 + seed);
        }
    }

    #[test]
    fn gradient_matches_finite_differences_literal_form() {
        for seed in 0..5 {
            fd_check(ContrastiveForm::Literal, 50 + seed);
        }
    }

    #[test]
    fn loss_decreases_at_positive_mean() {
        let stack = random_stack(7, 3, 16, 4);
        let pos_mean = stack
            .matrix
            .slice(ndarray::s![stack.class_ranges[0].clone(), ..])
            .mean_axis(Axis(0))
            .unwrap();
        let neg_row = stack.matrix.row(stack.class_ranges[2].start).to_owned();
        let at_neg = normalize_rows(
            &Array2::from_shape_fn((1, 4), |(_, d)| neg_row[d]).view(),
            1e-12,
        );
        let at_pos = normalize_rows(
            &Array2::from_shape_fn((1, 4), |(_, d)| pos_mean[d]).view(),
            1e-12,
        );
        let (loss_neg, _) =
            class_contrastive(&at_neg.view(), 0, &stack, ContrastiveForm::LogRatio).unwrap();
        let (loss_pos, _) =
            class_contrastive(&at_pos.view(), 0, &stack, ContrastiveForm::LogRatio).unwrap();
        assert!(
            loss_pos < loss_neg,
            "loss at positive mean {loss_pos} not below loss at negative cluster {loss_neg}"
        );
    }

    #[test]
    fn permutation_invariance() {
        let stack = random_stack(13, 3, 8, 4);
        let anchors = random_anchors(14, 6, 4);
        let (loss, grad) =
            class_contrastive(&anchors.view(), 1, &stack, ContrastiveForm::LogRatio).unwrap();

        // Shuffle anchors.
        let perm = [5usize, 2, 0, 4, 1, 3];
        let shuffled = Array2::from_shape_fn((6, 4), |(r, c)| anchors[[perm[r], c]]);
        let (loss_s, grad_s) =
            class_contrastive(&shuffled.view(), 1, &stack, ContrastiveForm::LogRatio).unwrap();
        assert!((loss - loss_s).abs() < 1e-12);
        for (r, &p) in perm.iter().enumerate() {
            for c in 0..4 {
                assert!((grad_s[[r, c]] - grad[[p, c]]).abs() < 1e-12);
            }
        }

        // Shuffle rows inside the positive and one negative block.
        let mut matrix = stack.matrix.clone();
        let r0 = stack.class_ranges[1].start;
        for (a, b) in [(r0, r0 + 3), (r0 + 1, r0 + 7)] {
            for c in 0..4 {
                matrix.swap([a, c], [b, c]);
            }
        }
        let n0 = stack.class_ranges[2].start;
        for c in 0..4 {
            matrix.swap([n0, c], [n0 + 5, c]);
        }
        let shuffled_stack = QueueStack {
            matrix,
            class_ranges: stack.class_ranges.clone(),
        };
        let (loss_q, grad_q) =
            class_contrastive(&anchors.view(), 1, &shuffled_stack, ContrastiveForm::LogRatio)
                .unwrap();
        assert!((loss - loss_q).abs() < 1e-12);
        assert!(crate::numeric::max_abs_diff(&grad.view(), &grad_q.view()) < 1e-12);
    }

    #[test]
    fn literal_form_differs_from_log_form() {
        let stack = random_stack(23, 3, 8, 4);
        let anchors = random_anchors(24, 3, 4);
        let (l1, _) =
            class_contrastive(&anchors.view(), 0, &stack, ContrastiveForm::LogRatio).unwrap();
        let (l2, _) =
            class_contrastive(&anchors.view(), 0, &stack, ContrastiveForm::Literal).unwrap();
        assert!((l1 - l2).abs() > 1e-6);
    }

    #[test]
    fn total_sums_over_classes_with_anchors() {
        let stack = random_stack(31, 3, 8, 4);
        let a0 = random_anchors(32, 2, 4);
        let a2 = random_anchors(33, 3, 4);
        let sets = vec![a0.clone(), Array2::zeros((0, 4)), a2.clone()];
        let (total, grads) =
            total_contrastive(&sets, &stack, ContrastiveForm::LogRatio).unwrap();
        let (l0, _) = class_contrastive(&a0.view(), 0, &stack, ContrastiveForm::LogRatio).unwrap();
        let (l2, _) = class_contrastive(&a2.view(), 2, &stack, ContrastiveForm::LogRatio).unwrap();
        assert!((total - (l0 + l2)).abs() < 1e-12);
        assert_eq!(grads[1].nrows(), 0);
    }

    #[test]
    fn queue_stack_layout() {
        let stack = random_stack(41, 3, 8, 4);
        assert_eq!(stack.matrix.nrows(), 24);
        assert_eq!(stack.class_ranges, vec![0..8, 8..16, 16..24]);
    }
}
