//! Row-wise numeric helpers shared by the substrate, memory, and fusion code.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

/// Row-stable softmax: subtracts the per-row max before exponentiating.
pub fn softmax_rows(logits: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// L2-normalizes each row. Rows with norm below `eps` are left as all zeros.
pub fn normalize_rows(x: &ArrayView2<f64>, eps: f64) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < eps {
            row.fill(0.0);
        } else {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
    out
}

/// Per-row L2 norms.
pub fn row_norms(x: &ArrayView2<f64>) -> Array1<f64> {
    Array1::from_iter(
        x.rows()
            .into_iter()
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()),
    )
}

/// Index of the largest element; ties break to the lowest index.
pub fn argmax(row: &ArrayView1<f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Per-row argmax with lowest-index tie-breaking.
pub fn argmax_rows(x: &ArrayView2<f64>) -> Vec<usize> {
    x.rows().into_iter().map(|r| argmax(&r)).collect()
}

/// exp(x) for |x| <= 1, via a degree-16 Taylor polynomial (Horner form).
///
/// Max relative error ~8e-15 on the valid range; used for the similarity
/// softmaxes whose inputs are inner products of unit vectors. Inputs outside
/// [-1.001, 1.001] fall back to `f64::exp`.
#[inline]
pub fn exp_unit(x: f64) -> f64 {
    if x.abs() > 1.001 {
        return x.exp();
    }
    const C: [f64; 17] = [
        1.0,
        1.0,
        0.5,
        1.0 / 6.0,
        1.0 / 24.0,
        1.0 / 120.0,
        1.0 / 720.0,
        1.0 / 5040.0,
        1.0 / 40320.0,
        1.0 / 362_880.0,
        1.0 / 3_628_800.0,
        1.0 / 39_916_800.0,
        1.0 / 479_001_600.0,
        1.0 / 6_227_020_800.0,
        1.0 / 87_178_291_200.0,
        1.0 / 1_307_674_368_000.0,
        1.0 / 20_922_789_888_000.0,
    ];
    let mut acc = C[16];
    for i in (0..16).rev() {
        acc = acc * x + C[i];
    }
    acc
}

/// Relative error with a floor to keep near-zero comparisons meaningful.
pub fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Max absolute elementwise difference between two equal-shaped matrices.
pub fn max_abs_diff(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_rows_sum_to_one() {
        let l = array![[1.0, 2.0, 3.0], [-500.0, 0.0, 500.0]];
        let p = softmax_rows(&l.view());
        for row in p.rows() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn softmax_shift_invariant() {
        let l = array![[0.3, -1.2, 4.0]];
        let shifted = array![[0.3 + 7.5, -1.2 + 7.5, 4.0 + 7.5]];
        let a = softmax_rows(&l.view());
        let b = softmax_rows(&shifted.view());
        assert!(max_abs_diff(&a.view(), &b.view()) < 1e-9);
    }

    #[test]
    fn normalize_rows_unit_norm() {
        let x = array![[3.0, 4.0], [0.0, 0.0]];
        let z = normalize_rows(&x.view(), 1e-12);
        assert!((z[[0, 0]] - 0.6).abs() < 1e-15);
        assert!((z[[0, 1]] - 0.8).abs() < 1e-15);
        assert_eq!(z[[1, 0]], 0.0);
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        let r = array![1.0, 3.0, 3.0, 0.0];
        assert_eq!(argmax(&r.view()), 1);
    }

    #[test]
    fn exp_unit_matches_libm() {
        let mut max_rel: f64 = 0.0;
        for i in 0..=20_000 {
            let x = -1.0 + 2.0 * (i as f64) / 20_000.0;
            max_rel = max_rel.max(rel_error(exp_unit(x), x.exp(), 1e-300));
        }
        assert!(max_rel < 1e-13, "max rel err {max_rel:.3e}");
        // out-of-range falls back to libm
        assert_eq!(exp_unit(3.7), 3.7f64.exp());
    }
}
