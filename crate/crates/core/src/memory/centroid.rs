//! Per-class Gaussian source statistics and pseudo-source feature banks.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::numeric::normalize_rows;

const NORM_EPS: f64 = 1e-12;

/// Source snapshot (mean and per-dimension standard deviation of the class's
/// normalized features) plus the live mean tracked during adaptation.
#[derive(Debug, Clone)]
pub struct ClassCentroid {
    pub mu_src: Array1<f64>,
    pub sigma_src: Array1<f64>,
    pub live_mean: Array1<f64>,
}

/// Fits one diagonal Gaussian per class from unit-norm feature rows.
///
/// `sigma` is the population standard deviation per dimension. The live mean
/// starts at the source mean.
pub fn build_source_centroids(features_by_class: &[Array2<f64>]) -> Result<Vec<ClassCentroid>> {
    let mut out = Vec::with_capacity(features_by_class.len());
    for (k, feats) in features_by_class.iter().enumerate() {
        let n = feats.nrows();
        if n < 2 {
            return Err(Error::contract(format!(
                "class {k} has {n} feature rows; need at least 2 for a centroid"
            )));
        }
        let dim = feats.ncols();
        let inv_n = 1.0 / n as f64;
        let mut mu = Array1::<f64>::zeros(dim);
        for row in feats.rows() {
            mu.zip_mut_with(&row, |m, &v| *m += v);
        }
        mu.mapv_inplace(|v| v * inv_n);
        let mut var = Array1::<f64>::zeros(dim);
        for row in feats.rows() {
            for (d, &v) in row.iter().enumerate() {
                let diff = v - mu[d];
                var[d] += diff * diff;
            }
        }
        var.mapv_inplace(|v| (v * inv_n).sqrt());
        out.push(ClassCentroid {
            live_mean: mu.clone(),
            mu_src: mu,
            sigma_src: var,
        });
    }
    Ok(out)
}

/// Raw elementwise-Gaussian draws around a class centroid, before
/// normalization. Exposed separately so the sampling distribution itself is
/// testable.
pub fn sample_gaussian_rows<R: Rng + ?Sized>(
    c: &ClassCentroid,
    n: usize,
    rng: &mut R,
) -> Array2<f64> {
    let dim = c.mu_src.len();
    let mut rows = Array2::zeros((n, dim));
    for mut row in rows.rows_mut() {
        for (d, v) in row.iter_mut().enumerate() {
            let sigma = c.sigma_src[d];
            *v = if sigma > 0.0 {
                Normal::new(c.mu_src[d], sigma).expect("finite params").sample(rng)
            } else {
                // Degenerate dimension: keep the mean, still consume one draw
                // so the stream position does not depend on sigma.
                let _: f64 = StandardNormal.sample(rng);
                c.mu_src[d]
            };
        }
    }
    rows
}

/// Fixed bank of normalized pseudo-source features for one class/modality.
#[derive(Debug, Clone)]
pub struct PseudoSourceBank {
    pub rows: Array2<f64>,
}

impl PseudoSourceBank {
    /// `n_q` normalized draws from the class Gaussian.
    pub fn sample(c: &ClassCentroid, n_q: usize, rng: &mut impl Rng) -> Result<Self> {
        if n_q < 1 {
            return Err(Error::contract("bank size must be at least 1"));
        }
        let raw = sample_gaussian_rows(c, n_q, rng);
        let rows = normalize_rows(&raw.view(), NORM_EPS);
        for (i, row) in rows.rows().into_iter().enumerate() {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::config(format!(
                    "pseudo-source draw {i} is numerically degenerate (norm {norm:.3e})"
                )));
            }
        }
        Ok(PseudoSourceBank { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    /// `count` rows sampled uniformly without replacement.
    pub fn sample_rows(&self, count: usize, rng: &mut impl Rng) -> Array2<f64> {
        let count = count.min(self.len());
        let picks = rand::seq::index::sample(rng, self.len(), count);
        let dim = self.rows.ncols();
        let mut out = Array2::zeros((count, dim));
        for (i, src) in picks.iter().enumerate() {
            out.row_mut(i).assign(&self.rows.row(src));
        }
        out
    }

    pub fn mean(&self) -> Array1<f64> {
        let inv = 1.0 / self.len() as f64;
        let mut mu = Array1::zeros(self.rows.ncols());
        for row in self.rows.rows() {
            mu.zip_mut_with(&row, |m, &v| *m += v);
        }
        mu.mapv_inplace(|v| v * inv);
        mu
    }
}

/// Confidence gating and top-count selection parameters for queue updates.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct RestorationPolicy {
    /// Probability that a step replays pseudo-source features into the
    /// queues on top of that step's target enqueue.
    pub p_rs: f64,
    /// Rows enqueued per restoration, and the per-class cap on confident
    /// target features.
    pub n_enq: usize,
    /// Minimum predicted-class probability for a feature to be kept.
    pub tau_cf: f64,
}

impl Default for RestorationPolicy {
    fn default() -> Self {
        RestorationPolicy {
            p_rs: 0.5,
            n_enq: 200,
            tau_cf: 0.8,
        }
    }
}

impl RestorationPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_rs) {
            return Err(Error::config(format!("p_rs {} outside [0, 1]", self.p_rs)));
        }
        if !(0.0..=1.0).contains(&self.tau_cf) {
            return Err(Error::config(format!("tau_cf {} outside [0, 1]", self.tau_cf)));
        }
        if self.n_enq == 0 {
            return Err(Error::config("n_enq must be positive"));
        }
        Ok(())
    }
}

/// Confident features of one class, with the point rows they came from.
#[derive(Debug, Clone)]
pub struct ConfidentSet {
    pub indices: Vec<usize>,
    pub features: Array2<f64>,
}

impl ConfidentSet {
    pub fn empty(dim: usize) -> Self {
        ConfidentSet {
            indices: Vec::new(),
            features: Array2::zeros((0, dim)),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Splits a batch into per-class confident feature sets.
///
/// A point belongs to class `k` when `k` is its predicted class (argmax,
/// lowest index on ties) and the predicted probability reaches `tau_cf`.
/// When more than `n_enq` qualify, the most confident `n_enq` are kept;
/// ties at the cutoff keep the lowest point index. Returned features are
/// row-normalized.
pub fn select_confident(
    probs: &ArrayView2<f64>,
    features: &ArrayView2<f64>,
    n_classes: usize,
    policy: &RestorationPolicy,
) -> Vec<ConfidentSet> {
    let dim = features.ncols();
    let mut per_class: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_classes];
    for (i, row) in probs.rows().into_iter().enumerate() {
        let k = crate::numeric::argmax(&row);
        let conf = row[k];
        if conf >= policy.tau_cf {
            per_class[k].push((i, conf));
        }
    }
    per_class
        .into_iter()
        .map(|mut entries| {
            // Highest confidence first; equal confidences keep input order
            // (sort is stable), so the lowest index wins at the cutoff.
            entries.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            entries.truncate(policy.n_enq);
            // Back to point order for a deterministic, order-independent
            // output layout.
            entries.sort_by_key(|e| e.0);
            if entries.is_empty() {
                return ConfidentSet::empty(dim);
            }
            let mut feats = Array2::zeros((entries.len(), dim));
            for (r, (idx, _)) in entries.iter().enumerate() {
                feats.row_mut(r).assign(&features.row(*idx));
            }
            let features = normalize_rows(&feats.view(), NORM_EPS);
            ConfidentSet {
                indices: entries.into_iter().map(|e| e.0).collect(),
                features,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn centroid_of_identical_rows_has_zero_sigma() {
        let v = array![[0.6, 0.8], [0.6, 0.8], [0.6, 0.8], [0.6, 0.8]];
        let cents = build_source_centroids(&[v]).unwrap();
        assert_eq!(cents[0].mu_src[0], 0.6);
        assert_eq!(cents[0].mu_src[1], 0.8);
        assert!(cents[0].sigma_src.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn centroid_of_antipodal_rows_is_zero() {
        let v = array![[1.0, 0.0], [-1.0, 0.0]];
        let cents = build_source_centroids(&[v]).unwrap();
        assert!(cents[0].mu_src.iter().all(|&m| m.abs() < 1e-15));
    }

    #[test]
    fn centroid_matches_two_pass_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let raw = Array2::from_shape_fn((100, 6), |_| rng.gen_range(-1.0..1.0));
        let feats = normalize_rows(&raw.view(), 1e-12);
        let cents = build_source_centroids(&[feats.clone()]).unwrap();

        for d in 0..6 {
            let mut mean = 0.0;
            for r in 0..100 {
                mean += feats[[r, d]];
            }
            mean /= 100.0;
            let mut var = 0.0;
            for r in 0..100 {
                var += (feats[[r, d]] - mean).powi(2);
            }
            let std = (var / 100.0).sqrt();
            assert!((cents[0].mu_src[d] - mean).abs() < 1e-12);
            assert!((cents[0].sigma_src[d] - std).abs() < 1e-12);
        }
    }

    #[test]
    fn centroid_rejects_single_row_class() {
        let v = array![[1.0, 0.0]];
        let err = build_source_centroids(&[v]).unwrap_err();
        assert!(err.to_string().contains("class 0"));
    }

    #[test]
    fn degenerate_bank_is_normalized_mean() {
        let c = ClassCentroid {
            mu_src: array![3.0, 4.0],
            sigma_src: array![0.0, 0.0],
            live_mean: array![3.0, 4.0],
        };
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let bank = PseudoSourceBank::sample(&c, 8, &mut rng).unwrap();
        for row in bank.rows.rows() {
            assert!((row[0] - 0.6).abs() < 1e-12);
            assert!((row[1] - 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn bank_sampling_is_deterministic_per_seed() {
        let c = ClassCentroid {
            mu_src: array![0.2, -0.4, 0.7],
            sigma_src: array![0.1, 0.2, 0.05],
            live_mean: array![0.2, -0.4, 0.7],
        };
        let a = PseudoSourceBank::sample(&c, 32, &mut ChaCha12Rng::seed_from_u64(7)).unwrap();
        let b = PseudoSourceBank::sample(&c, 32, &mut ChaCha12Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a.rows, b.rows);
    }

    #[test]
    fn gaussian_rows_clt_bound() {
        let c = ClassCentroid {
            mu_src: array![0.3, -0.5, 0.1, 0.8],
            sigma_src: array![0.2, 0.15, 0.3, 0.1],
            live_mean: array![0.3, -0.5, 0.1, 0.8],
        };
        let n_q = 4096;
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let rows = sample_gaussian_rows(&c, n_q, &mut rng);
        for d in 0..4 {
            let mean = rows.column(d).sum() / n_q as f64;
            let bound = 4.0 * c.sigma_src[d] / (n_q as f64).sqrt();
            assert!(
                (mean - c.mu_src[d]).abs() < bound,
                "dim {d}: sample mean {mean} vs mu {} (bound {bound})",
                c.mu_src[d]
            );
        }
    }

    #[test]
    fn select_confident_threshold_and_cap() {
        let policy = RestorationPolicy {
            tau_cf: 0.8,
            n_enq: 200,
            p_rs: 0.5,
        };
        // All below threshold: every class set empty.
        let probs = array![[0.6, 0.4], [0.5, 0.5]];
        let feats = array![[1.0, 0.0], [0.0, 1.0]];
        let sets = select_confident(&probs.view(), &feats.view(), 2, &policy);
        assert!(sets.iter().all(|s| s.is_empty()));

        // 300 fully confident class-0 points: exactly n_enq kept, ties break
        // to the lowest indices.
        let probs = Array2::from_shape_fn((300, 2), |(_, c)| if c == 0 { 1.0 } else { 0.0 });
        let feats = Array2::from_shape_fn((300, 3), |(r, c)| if c == 0 { 1.0 + r as f64 } else { 0.5 });
        let sets = select_confident(&probs.view(), &feats.view(), 2, &policy);
        assert_eq!(sets[0].len(), 200);
        assert_eq!(sets[0].indices, (0..200).collect::<Vec<_>>());
        assert!(sets[1].is_empty());
        for row in sets[0].features.rows() {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn select_confident_permutation_stable_up_to_tiebreak() {
        let policy = RestorationPolicy {
            tau_cf: 0.5,
            n_enq: 3,
            p_rs: 0.5,
        };
        let probs = array![
            [0.9, 0.1],
            [0.7, 0.3],
            [0.95, 0.05],
            [0.6, 0.4],
            [0.85, 0.15]
        ];
        let feats = Array2::from_shape_fn((5, 2), |(r, c)| if c == 0 { r as f64 + 1.0 } else { 1.0 });
        let sets = select_confident(&probs.view(), &feats.view(), 2, &policy);
        // Top three confidences are rows 2 (0.95), 0 (0.9), 4 (0.85).
        assert_eq!(sets[0].indices, vec![0, 2, 4]);
    }
}
