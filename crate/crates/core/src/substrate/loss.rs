//! Point-wise losses on classifier outputs, with gradients at the logits.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Hard-label negative log-likelihood, averaged over rows.
///
/// Returns the loss and its gradient with respect to the logits,
/// `(p - onehot(y)) / N`. The loss value is computed from the logits via
/// log-sum-exp rather than `log(p)`.
pub fn cross_entropy(
    logits: &ArrayView2<f64>,
    probs: &ArrayView2<f64>,
    labels: &[usize],
) -> Result<(f64, Array2<f64>)> {
    let (n, n_classes) = logits.dim();
    if labels.len() != n {
        return Err(Error::contract("label count does not match logit rows"));
    }
    if probs.dim() != (n, n_classes) {
        return Err(Error::contract("probs shape does not match logits"));
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut d_logits = probs.to_owned();
    for (r, &y) in labels.iter().enumerate() {
        if y >= n_classes {
            return Err(Error::contract(format!("label {y} out of range")));
        }
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        d_logits[[r, y]] -= 1.0;
    }
    d_logits.mapv_inplace(|v| v * inv_n);
    Ok((loss * inv_n, d_logits))
}

/// Mean prediction entropy, `-(1/N) sum_n sum_c p log p`, with its logit
/// gradient `-p_j (log p_j + H_n) / N` per row.
pub fn mean_entropy(probs: &ArrayView2<f64>) -> (f64, Array2<f64>) {
    let (n, _) = probs.dim();
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut d_logits = Array2::zeros(probs.raw_dim());
    for (r, row) in probs.rows().into_iter().enumerate() {
        let h: f64 = row
            .iter()
            .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
            .sum();
        total += h;
        for (c, &p) in row.iter().enumerate() {
            if p > 0.0 {
                d_logits[[r, c]] = -p * (p.ln() + h) * inv_n;
            }
        }
    }
    (total * inv_n, d_logits)
}
