//! Intra-modal aggregation of raw and augmentation-average teacher
//! predictions, and inter-modal fusion into cross-modal pseudo-labels.
//!
//! Per point, the raw and augmentation-average predictions are blended with
//! weights given by a softmax over centroid similarities of the respective
//! features, evaluated at each prediction's argmax class. Across modalities,
//! agreement between the raw and augmented argmax boosts a modality's weight
//! (sum instead of max) before the convex cross-modal blend.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::numeric::{argmax_rows, softmax_rows};
use crate::stream::world::PointBatch;
use crate::substrate::{forward, Modality, Network};

/// Raw and augmentation-average teacher outputs for one modality.
#[derive(Debug, Clone)]
pub struct TeacherOutputs {
    /// Raw softmax prediction, one row per point.
    pub p: Array2<f64>,
    /// Mean of the augmented copies' softmax outputs (equals `p` when no
    /// augmentations were supplied).
    pub p_aug: Array2<f64>,
    /// Normalized features of the raw input.
    pub z: Array2<f64>,
    /// Mean of the per-copy normalized features, deliberately not
    /// re-normalized: its length shrinks when the copies' feature directions
    /// disagree, which flattens the similarity softmax and pulls the
    /// augmentation weight toward uniform exactly when the augmented view is
    /// unreliable.
    pub z_aug: Array2<f64>,
}

/// Teacher inference over the raw batch and its augmented copies.
///
/// Probabilities are averaged (not logits); features are normalized per copy
/// before averaging. Augmentations here preserve row order, so per-point
/// outputs align without an explicit inverse mapping.
pub fn teacher_predict(
    teacher: &Network,
    batch: &PointBatch,
    modality: Modality,
    augmented: &[PointBatch],
) -> Result<TeacherOutputs> {
    let raw = forward(teacher, &batch.modality(modality))?;
    let n = raw.probs.nrows();
    if augmented.is_empty() {
        return Ok(TeacherOutputs {
            p_aug: raw.probs.clone(),
            z_aug: raw.z.clone(),
            p: raw.probs,
            z: raw.z,
        });
    }
    let inv = 1.0 / augmented.len() as f64;
    let mut p_aug = Array2::zeros(raw.probs.raw_dim());
    let mut z_aug = Array2::zeros(raw.z.raw_dim());
    for copy in augmented {
        if copy.n_points() != n {
            return Err(Error::contract(format!(
                "augmented copy has {} points, raw batch has {n}",
                copy.n_points()
            )));
        }
        let cache = forward(teacher, &copy.modality(modality))?;
        p_aug.scaled_add(inv, &cache.probs);
        z_aug.scaled_add(inv, &cache.z);
    }
    Ok(TeacherOutputs {
        p: raw.probs,
        p_aug,
        z: raw.z,
        z_aug,
    })
}

/// Per-point reliability weight: softmax over classes of the feature's
/// similarity to each live centroid, read off at the prediction's class.
pub fn impa_weights(
    z: &ArrayView2<f64>,
    live_means: &ArrayView2<f64>,
    classes: &[usize],
) -> Vec<f64> {
    let sims = z.dot(&live_means.t());
    let soft = softmax_rows(&sims.view());
    classes
        .iter()
        .enumerate()
        .map(|(j, &k)| soft[[j, k]])
        .collect()
}

/// Convex blend of raw and augmentation-average predictions.
pub fn impa_fuse(
    p: &ArrayView2<f64>,
    p_aug: &ArrayView2<f64>,
    w: &[f64],
    w_aug: &[f64],
) -> Array2<f64> {
    let mut out = Array2::zeros(p.raw_dim());
    for j in 0..p.nrows() {
        let denom = w[j] + w_aug[j];
        for c in 0..p.ncols() {
            out[[j, c]] = (w[j] * p[[j, c]] + w_aug[j] * p_aug[[j, c]]) / denom;
        }
    }
    out
}

/// Inter-modal weight: the two weights add when raw and augmented argmax
/// agree, otherwise the larger one is kept.
pub fn xmpf_weight(w: &[f64], w_aug: &[f64], k: &[usize], k_aug: &[usize]) -> Vec<f64> {
    w.iter()
        .zip(w_aug)
        .zip(k.iter().zip(k_aug))
        .map(|((&wr, &wa), (&kr, &ka))| if kr == ka { wr + wa } else { wr.max(wa) })
        .collect()
}

/// Per-modality fusion product consumed by the cross-modal stage.
#[derive(Debug, Clone)]
pub struct IntraModalResult {
    pub p: Array2<f64>,
    pub p_aug: Array2<f64>,
    /// Fused intra-modal prediction.
    pub p_fused: Array2<f64>,
    pub k_raw: Vec<usize>,
    pub k_aug: Vec<usize>,
    /// Argmax of the fused prediction.
    pub k_fused: Vec<usize>,
    pub w_raw: Vec<f64>,
    pub w_aug: Vec<f64>,
    /// Inter-modal weight per point.
    pub w_hat: Vec<f64>,
}

/// How the raw/augmented blend is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntraFusionMode {
    /// Centroid-similarity weighting.
    Adaptive,
    /// Keep the raw prediction.
    RawOnly,
    /// Keep the augmentation-average prediction.
    AugOnly,
    /// Unweighted mean of the two.
    SimpleAverage,
}

/// Runs the intra-modal stage for one modality.
pub fn intra_modal(
    out: &TeacherOutputs,
    live_means: &ArrayView2<f64>,
    mode: IntraFusionMode,
) -> IntraModalResult {
    let k_raw = argmax_rows(&out.p.view());
    let k_aug = argmax_rows(&out.p_aug.view());
    let w_raw = impa_weights(&out.z.view(), live_means, &k_raw);
    let w_aug = impa_weights(&out.z_aug.view(), live_means, &k_aug);
    let p_fused = match mode {
        IntraFusionMode::Adaptive => {
            impa_fuse(&out.p.view(), &out.p_aug.view(), &w_raw, &w_aug)
        }
        IntraFusionMode::RawOnly => out.p.clone(),
        IntraFusionMode::AugOnly => out.p_aug.clone(),
        IntraFusionMode::SimpleAverage => {
            let ones = vec![1.0; k_raw.len()];
            impa_fuse(&out.p.view(), &out.p_aug.view(), &ones, &ones)
        }
    };
    let k_fused = argmax_rows(&p_fused.view());
    let w_hat = xmpf_weight(&w_raw, &w_aug, &k_raw, &k_aug);
    IntraModalResult {
        p: out.p.clone(),
        p_aug: out.p_aug.clone(),
        p_fused,
        k_raw,
        k_aug,
        k_fused,
        w_raw,
        w_aug,
        w_hat,
    }
}

impl IntraModalResult {
    /// Mean raw weight, mean augmented weight, mean inter-modal weight, and
    /// the raw/augmented argmax agreement rate.
    pub fn diagnostics(&self) -> (f64, f64, f64, f64) {
        let n = self.k_raw.len().max(1) as f64;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
        let agree = self
            .k_raw
            .iter()
            .zip(&self.k_aug)
            .filter(|(a, b)| a == b)
            .count() as f64
            / n;
        (mean(&self.w_raw), mean(&self.w_aug), mean(&self.w_hat), agree)
    }
}

/// Cross-modal prediction and hard pseudo-label per point.
#[derive(Debug, Clone)]
pub struct CrossModalLabel {
    pub p_xm: Array2<f64>,
    pub labels: Vec<usize>,
}

/// Convex cross-modal blend of the two fused predictions, weighted by the
/// inter-modal weights (or equal weights when `equal_weights` is set).
pub fn xmpf_fuse(
    r2d: &IntraModalResult,
    r3d: &IntraModalResult,
    equal_weights: bool,
) -> Result<CrossModalLabel> {
    let n = r2d.p_fused.nrows();
    if r3d.p_fused.nrows() != n {
        return Err(Error::contract("modalities disagree on point count"));
    }
    let n_c = r2d.p_fused.ncols();
    let mut p_xm = Array2::zeros((n, n_c));
    for j in 0..n {
        let (wa, wb) = if equal_weights {
            (1.0, 1.0)
        } else {
            (r2d.w_hat[j], r3d.w_hat[j])
        };
        let denom = wa + wb;
        for c in 0..n_c {
            p_xm[[j, c]] = (wa * r2d.p_fused[[j, c]] + wb * r3d.p_fused[[j, c]]) / denom;
        }
    }
    let labels = argmax_rows(&p_xm.view());
    Ok(CrossModalLabel { p_xm, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::world::{make_stream, SegmentSpec, WorldSpec};
    use crate::stream::{augment, default_schedule};
    use crate::substrate::{Activation, Layer};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn identity_net(dim: usize) -> Network {
        let mut l = Layer::zeros(dim, dim, Activation::Identity);
        for i in 0..dim {
            l.weights[[i, i]] = 1.0;
        }
        Network::new(vec![l]).unwrap()
    }

    fn batch_2d(x: Array2<f64>) -> PointBatch {
        let n = x.nrows();
        PointBatch {
            x3d: Array2::zeros((n, 3)),
            labels: vec![0; n],
            segment_id: 0,
            sample_index: 0,
            x2d: x,
        }
    }

    #[test]
    fn identity_augmentation_matches_raw() {
        let spec = WorldSpec::default();
        let batch = &make_stream(&spec, &[SegmentSpec::clean("c", 1)], 3).unwrap()[0];
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let net = Network::default_arch(spec.dim_2d, spec.n_classes, &mut rng);
        let copies = augment(batch, Modality::Appearance2d, &[1.0]);
        let out = teacher_predict(&net, batch, Modality::Appearance2d, &copies).unwrap();
        assert!(crate::numeric::max_abs_diff(&out.p.view(), &out.p_aug.view()) < 1e-9);
        assert!(crate::numeric::max_abs_diff(&out.z.view(), &out.z_aug.view()) < 1e-9);
    }

    #[test]
    fn probability_averaging_of_two_copies() {
        let net = identity_net(2);
        let raw = batch_2d(array![[0.0, 0.0]]);
        let a = batch_2d(array![[50.0, 0.0]]);
        let b = batch_2d(array![[0.0, 50.0]]);
        let out = teacher_predict(&net, &raw, Modality::Appearance2d, &[a, b]).unwrap();
        assert!((out.p_aug[[0, 0]] - 0.5).abs() < 1e-9);
        assert!((out.p_aug[[0, 1]] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn antipodal_feature_mean_gives_uniform_weight() {
        // Copies with exactly opposite feature directions cancel: the
        // augmentation feature is the zero vector, whose similarity to every
        // centroid is zero, so the augmentation weight is exactly uniform.
        let net = identity_net(2);
        let raw = batch_2d(array![[3.0, 4.0]]);
        let a = batch_2d(array![[1.0, 0.0]]);
        let b = batch_2d(array![[-1.0, 0.0]]);
        let out = teacher_predict(&net, &raw, Modality::Appearance2d, &[a, b]).unwrap();
        assert!(out.z_aug.iter().all(|&v| v.abs() < 1e-12));
        let means = array![[0.9, 0.1], [0.2, -0.7]];
        let w = impa_weights(&out.z_aug.view(), &means.view(), &[0]);
        assert!((w[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mismatched_copy_point_count_is_alignment_error() {
        let net = identity_net(2);
        let raw = batch_2d(array![[1.0, 0.0], [0.0, 1.0]]);
        let bad = batch_2d(array![[1.0, 0.0]]);
        assert!(teacher_predict(&net, &raw, Modality::Appearance2d, &[bad]).is_err());
    }

    #[test]
    fn impa_weight_two_class_hand_value() {
        let z = array![[1.0, 0.0]];
        let means = array![[1.0, 0.0], [0.0, 1.0]];
        let w = impa_weights(&z.view(), &means.view(), &[0]);
        let e = std::f64::consts::E;
        assert!((w[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((w[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn impa_weight_uniform_when_similarities_equal() {
        let z = array![[1.0, 0.0, 0.0]];
        let means = array![[0.3, 0.0, 0.0], [0.3, 0.0, 0.0], [0.3, 0.0, 0.0], [0.3, 0.0, 0.0]];
        let w = impa_weights(&z.view(), &means.view(), &[2]);
        assert!((w[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn impa_weight_matches_naive_loop_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let z = normalize_rows(
            &Array2::from_shape_fn((10, 6), |_| rng.gen_range(-1.0..1.0)).view(),
            1e-12,
        );
        let means = Array2::from_shape_fn((4, 6), |_| rng.gen_range(-0.4..0.4));
        let classes: Vec<usize> = (0..10).map(|_| rng.gen_range(0..4)).collect();
        let w = impa_weights(&z.view(), &means.view(), &classes);
        for j in 0..10 {
            let mut sims = [0.0; 4];
            for (k, s) in sims.iter_mut().enumerate() {
                for d in 0..6 {
                    *s += means[[k, d]] * z[[j, d]];
                }
            }
            let mx = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = sims.iter().map(|s| (s - mx).exp()).sum();
            let expect = (sims[classes[j]] - mx).exp() / denom;
            assert!((w[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn impa_weight_monotone_in_similarity() {
        let means = array![[1.0, 0.0], [0.0, 1.0]];
        let mut last = 0.0;
        for i in 0..20 {
            let t = i as f64 / 19.0 * std::f64::consts::FRAC_PI_2;
            let z = array![[t.cos(), t.sin()]];
            // moving z away from mean 0 decreases similarity; sweep reversed
            let w = impa_weights(&z.view(), &means.view(), &[0])[0];
            if i > 0 {
                assert!(w < last, "weight must strictly decrease as similarity drops");
            }
            last = w;
        }
    }

    #[test]
    fn impa_fuse_cases() {
        let p = array![[0.8, 0.2]];
        let pa = array![[0.2, 0.8]];
        // equal weights -> plain mean
        let f = impa_fuse(&p.view(), &pa.view(), &[0.4], &[0.4]);
        assert!((f[[0, 0]] - 0.5).abs() < 1e-12);
        // vanishing augmented weight -> raw
        let f = impa_fuse(&p.view(), &pa.view(), &[0.5], &[1e-12]);
        assert!((f[[0, 0]] - 0.8).abs() < 1e-9);
        // hand-computed blend
        let f = impa_fuse(&p.view(), &pa.view(), &[3.0], &[1.0]);
        assert!((f[[0, 0]] - 0.65).abs() < 1e-12);
        assert!((f[[0, 1]] - 0.35).abs() < 1e-12);
    }

    #[test]
    fn xmpf_weight_branches() {
        let w = xmpf_weight(&[0.3], &[0.4], &[1], &[1]);
        assert!((w[0] - 0.7).abs() < 1e-12);
        let w = xmpf_weight(&[0.3], &[0.4], &[1], &[2]);
        assert!((w[0] - 0.4).abs() < 1e-12);
        // agreement doubles the disagreeing value when weights are equal
        let agree = xmpf_weight(&[0.3], &[0.3], &[1], &[1])[0];
        let disagree = xmpf_weight(&[0.3], &[0.3], &[1], &[2])[0];
        assert!((agree - 2.0 * disagree).abs() < 1e-12);
    }

    fn make_result(p_fused: Array2<f64>, w_hat: Vec<f64>) -> IntraModalResult {
        let k = argmax_rows(&p_fused.view());
        IntraModalResult {
            p: p_fused.clone(),
            p_aug: p_fused.clone(),
            k_raw: k.clone(),
            k_aug: k.clone(),
            k_fused: k,
            w_raw: w_hat.clone(),
            w_aug: vec![0.0; w_hat.len()],
            w_hat,
            p_fused,
        }
    }

    #[test]
    fn xmpf_fuse_equal_weights_is_mean() {
        let a = make_result(array![[0.7, 0.3]], vec![0.5]);
        let b = make_result(array![[0.1, 0.9]], vec![0.5]);
        let out = xmpf_fuse(&a, &b, false).unwrap();
        assert!((out.p_xm[[0, 0]] - 0.4).abs() < 1e-12);
        assert_eq!(out.labels, vec![1]);
    }

    #[test]
    fn xmpf_fuse_dominant_modality_wins() {
        let a = make_result(array![[0.9, 0.1], [0.8, 0.2]], vec![1e-6, 1e-6]);
        let b = make_result(array![[0.2, 0.8], [0.1, 0.9]], vec![1.0, 1.0]);
        let out = xmpf_fuse(&a, &b, false).unwrap();
        assert_eq!(out.labels, vec![1, 1]);
    }

    #[test]
    fn xmpf_fuse_agreement() {
        let a = make_result(array![[0.05, 0.05, 0.9]], vec![0.9]);
        let b = make_result(array![[0.1, 0.1, 0.8]], vec![0.7]);
        let out = xmpf_fuse(&a, &b, false).unwrap();
        assert_eq!(out.labels, vec![2]);
    }

    use crate::numeric::normalize_rows;

    #[test]
    fn fused_rows_stay_in_simplex_and_bounds() {
        let spec = WorldSpec::default();
        let stream = make_stream(&spec, &default_schedule(&spec), 21).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let net2 = Network::default_arch(spec.dim_2d, spec.n_classes, &mut rng);
        let net3 = Network::default_arch(spec.dim_3d, spec.n_classes, &mut rng);
        let means2 = Array2::from_shape_fn((5, 16), |_| rng.gen_range(-0.3..0.3));
        let means3 = Array2::from_shape_fn((5, 16), |_| rng.gen_range(-0.3..0.3));
        let deg = std::f64::consts::PI / 180.0;
        for batch in stream.iter().step_by(197) {
            let aug2 = augment(batch, Modality::Appearance2d, &[0.5, 0.75]);
            let aug3 = augment(batch, Modality::Geometry3d, &[120.0 * deg, 240.0 * deg]);
            let t2 = teacher_predict(&net2, batch, Modality::Appearance2d, &aug2).unwrap();
            let t3 = teacher_predict(&net3, batch, Modality::Geometry3d, &aug3).unwrap();
            let r2 = intra_modal(&t2, &means2.view(), IntraFusionMode::Adaptive);
            let r3 = intra_modal(&t3, &means3.view(), IntraFusionMode::Adaptive);
            let xm = xmpf_fuse(&r2, &r3, false).unwrap();
            for r in [&r2, &r3] {
                for j in 0..batch.n_points() {
                    assert!(r.w_raw[j] > 0.0 && r.w_raw[j] < 1.0);
                    assert!(r.w_aug[j] > 0.0 && r.w_aug[j] < 1.0);
                    assert!(r.w_hat[j] > 0.0 && r.w_hat[j] < 2.0);
                    let mut sum = 0.0;
                    for c in 0..5 {
                        let v = r.p_fused[[j, c]];
                        let lo = r.p[[j, c]].min(r.p_aug[[j, c]]);
                        let hi = r.p[[j, c]].max(r.p_aug[[j, c]]);
                        assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                        sum += v;
                    }
                    assert!((sum - 1.0).abs() < 1e-9);
                }
            }
            for j in 0..batch.n_points() {
                let mut sum = 0.0;
                for c in 0..5 {
                    let v = xm.p_xm[[j, c]];
                    let lo = r2.p_fused[[j, c]].min(r3.p_fused[[j, c]]);
                    let hi = r2.p_fused[[j, c]].max(r3.p_fused[[j, c]]);
                    assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                    sum += v;
                }
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn corrupted_modality_loses_to_clean_one() {
        // One modality is confidently right and self-consistent; the other
        // is uniform. The fused label must follow the clean modality.
        let n = 4;
        let p_clean = Array2::from_shape_fn((n, 3), |(_, c)| if c == 2 { 0.98 } else { 0.01 });
        let p_noise = Array2::from_elem((n, 3), 1.0 / 3.0);
        let clean = make_result(p_clean, vec![1.2; n]);
        let noisy = make_result(p_noise, vec![0.4; n]);
        let out = xmpf_fuse(&clean, &noisy, false).unwrap();
        assert!(out.labels.iter().all(|&k| k == 2));
    }
}
