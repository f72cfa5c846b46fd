//! Built-in invariant suite behind the `selftest` subcommand.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::Result;
use crate::fusion::{intra_modal, teacher_predict, xmpf_fuse, IntraFusionMode};
use crate::memory::centroid::{ClassCentroid, PseudoSourceBank, RestorationPolicy};
use crate::memory::contrastive::ContrastiveForm;
use crate::memory::queue::{apply_queue_update, restore_decision, MomentumQueue};
use crate::numeric::softmax_rows;
use crate::stream::{augment, make_stream, SegmentSpec, WorldSpec};
use crate::substrate::gradcheck::{grad_check, GradCheckInstance, NamedLoss};
use crate::substrate::net::{ema_update, Activation, Layer, Network};
use crate::substrate::Modality;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct SelftestReport {
    pub checks: Vec<CheckResult>,
}

impl SelftestReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn push(&mut self, name: &str, passed: bool, detail: String) {
        self.checks.push(CheckResult {
            name: name.to_string(),
            passed,
            detail,
        });
    }
}

/// Runs the invariant suite: gradient checks over many random instances,
/// softmax properties, EMA closed form, queue churn, and fusion convexity.
pub fn selftest(seed: u64) -> Result<SelftestReport> {
    let mut report = SelftestReport::default();

    // Gradient suite: every loss, 20 instances each.
    for loss in [
        NamedLoss::CrossEntropy,
        NamedLoss::Contrastive(ContrastiveForm::LogRatio),
        NamedLoss::Contrastive(ContrastiveForm::Literal),
        NamedLoss::Combined {
            lambda_cts: 1.0,
            form: ContrastiveForm::LogRatio,
        },
    ] {
        let mut worst: f64 = 0.0;
        for i in 0..20 {
            let inst = GradCheckInstance::random(seed.wrapping_add(1000 * i));
            let rep = grad_check(&inst, loss, 1e-5)?;
            worst = worst.max(rep.max_rel_error);
        }
        report.push(
            &format!("gradients/{loss}"),
            worst < 1e-4,
            format!("max rel err {worst:.3e} over 20 instances (tolerance 1e-4)"),
        );
    }

    // Softmax rows sum to one and shift invariance.
    {
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x50f7);
        let logits = Array2::from_shape_fn((64, 7), |_| rng.gen_range(-30.0..30.0));
        let p = softmax_rows(&logits.view());
        let sums_ok = p
            .rows()
            .into_iter()
            .all(|r| (r.sum() - 1.0).abs() < 1e-9 && r.iter().all(|&v| v >= 0.0));
        let shifted = &logits + 123.5;
        let p2 = softmax_rows(&shifted.view());
        let shift_ok = crate::numeric::max_abs_diff(&p.view(), &p2.view()) < 1e-9;
        report.push(
            "softmax/simplex-and-shift",
            sums_ok && shift_ok,
            format!("row sums ok: {sums_ok}, shift invariant: {shift_ok}"),
        );
    }

    // EMA geometric decay closed form.
    {
        let student = Network::new(vec![Layer::zeros(1, 1, Activation::Identity)]).unwrap();
        let mut l = Layer::zeros(1, 1, Activation::Identity);
        l.weights[[0, 0]] = 1.0;
        let mut teacher = Network::new(vec![l]).unwrap();
        for _ in 0..100 {
            ema_update(&mut teacher, &student, 0.999)?;
        }
        let got = teacher.layers()[0].weights[[0, 0]];
        let expect = 0.999f64.powi(100);
        let err = (got - expect).abs();
        report.push(
            "ema/geometric-decay",
            err < 1e-9,
            format!("after 100 steps: {got:.12} vs closed form {expect:.12} (|diff| {err:.3e})"),
        );
    }

    // Queue churn: capacity, unit norms, restoration frequency.
    {
        let c = ClassCentroid {
            mu_src: ndarray::Array1::from_shape_fn(8, |d| (d as f64 * 0.4).sin() * 0.4),
            sigma_src: ndarray::Array1::from_elem(8, 0.15),
            live_mean: ndarray::Array1::zeros(8),
        };
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x9_0e3);
        let bank = PseudoSourceBank::sample(&c, 128, &mut rng)?;
        let mut q = MomentumQueue::from_bank(&bank);
        let policy = RestorationPolicy {
            p_rs: 0.5,
            n_enq: 16,
            tau_cf: 0.8,
        };
        let mut restores = 0usize;
        for step in 0..2_000 {
            let restore = restore_decision(policy.p_rs, &mut rng);
            let count = step % 7;
            let raw = Array2::from_shape_fn((count, 8), |(r, d)| {
                ((step + r + d) as f64 * 0.13).sin()
            });
            let feats = crate::numeric::normalize_rows(&raw.view(), 1e-12);
            apply_queue_update(&mut q, &feats.view(), &bank, policy.n_enq, restore, &mut rng)?;
            restores += restore as usize;
        }
        let norms_ok = q
            .rows_storage()
            .rows()
            .into_iter()
            .all(|r| (r.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
        // 99.99% binomial interval for n=2000, p=0.5 is about +-87.
        let freq_ok = (913..=1_087).contains(&restores);
        report.push(
            "queue/churn",
            q.len() == q.capacity() && norms_ok && freq_ok,
            format!(
                "size {}/{}, unit norms: {norms_ok}, restores {restores}/2000",
                q.len(),
                q.capacity()
            ),
        );
    }

    // Fusion outputs stay in the simplex and inside convex bounds.
    {
        let spec = WorldSpec::default();
        let stream = make_stream(&spec, &[SegmentSpec::clean("c", 3)], seed ^ 0xF)?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xFF);
        let net2 = Network::default_arch(spec.dim_2d, spec.n_classes, &mut rng);
        let net3 = Network::default_arch(spec.dim_3d, spec.n_classes, &mut rng);
        let means = Array2::from_shape_fn((5, 16), |_| rng.gen_range(-0.3..0.3));
        let mut ok = true;
        let deg = std::f64::consts::PI / 180.0;
        for batch in &stream {
            let aug2 = augment(batch, Modality::Appearance2d, &[0.5, 0.75]);
            let aug3 = augment(batch, Modality::Geometry3d, &[120.0 * deg]);
            let t2 = teacher_predict(&net2, batch, Modality::Appearance2d, &aug2)?;
            let t3 = teacher_predict(&net3, batch, Modality::Geometry3d, &aug3)?;
            let r2 = intra_modal(&t2, &means.view(), IntraFusionMode::Adaptive);
            let r3 = intra_modal(&t3, &means.view(), IntraFusionMode::Adaptive);
            let xm = xmpf_fuse(&r2, &r3, false)?;
            for j in 0..batch.n_points() {
                let row_sum: f64 = (0..5).map(|c| xm.p_xm[[j, c]]).sum();
                ok &= (row_sum - 1.0).abs() < 1e-9;
                ok &= r2.w_hat[j] > 0.0 && r2.w_hat[j] < 2.0;
            }
        }
        report.push(
            "fusion/convexity",
            ok,
            "cross-modal rows in simplex, weights in (0, 2)".to_string(),
        );
    }

    // Stream determinism.
    {
        let spec = WorldSpec::default();
        let segs = vec![SegmentSpec::clean("c", 5)];
        let a = make_stream(&spec, &segs, seed)?;
        let b = make_stream(&spec, &segs, seed)?;
        let ok = a == b;
        report.push("stream/determinism", ok, format!("replay identical: {ok}"));
    }

    Ok(report)
}
