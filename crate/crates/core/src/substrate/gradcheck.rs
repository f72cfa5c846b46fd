//! Central-difference validation of the hand-derived gradients.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::Result;
use crate::memory::centroid::{ClassCentroid, PseudoSourceBank};
use crate::memory::contrastive::{total_contrastive, ContrastiveForm, QueueStack};
use crate::memory::queue::MomentumQueue;
use crate::numeric::rel_error;
use crate::substrate::loss::cross_entropy;
use crate::substrate::net::{backward, forward, Activation, Gradients, Layer, Network};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NamedLoss {
    CrossEntropy,
    Contrastive(ContrastiveForm),
    Combined {
        lambda_cts: f64,
        form: ContrastiveForm,
    },
}

impl std::fmt::Display for NamedLoss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NamedLoss::CrossEntropy => write!(f, "cross_entropy"),
            NamedLoss::Contrastive(ContrastiveForm::LogRatio) => write!(f, "contrastive_log"),
            NamedLoss::Contrastive(ContrastiveForm::Literal) => write!(f, "contrastive_literal"),
            NamedLoss::Combined { lambda_cts, .. } => write!(f, "combined(lambda={lambda_cts})"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub loss: String,
    pub max_rel_error: f64,
    pub params_checked: usize,
}

/// A self-contained random instance: network, batch, hard labels, per-point
/// anchor classes, and a queue stack in the network's feature space.
#[derive(Debug, Clone)]
pub struct GradCheckInstance {
    pub net: Network,
    pub x: Array2<f64>,
    pub labels: Vec<usize>,
    pub anchor_class: Vec<usize>,
    pub stack: QueueStack,
}

impl GradCheckInstance {
    /// Draws an instance, redrawing until every ReLU pre-activation clears a
    /// margin that keeps central differences valid at eps ~ 1e-5.
    pub fn random(seed: u64) -> Self {
        let n_points = 6;
        let in_dim = 4;
        let n_classes = 3;
        for attempt in 0..64 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(attempt * 0x9e37));
            let net = Network::new(vec![
                Layer::he_init(in_dim, 8, Activation::Relu, &mut rng),
                Layer::he_init(8, 5, Activation::Relu, &mut rng),
                Layer::he_init(5, n_classes, Activation::Identity, &mut rng),
            ])
            .expect("valid net");
            let x = Array2::from_shape_fn((n_points, in_dim), |_| rng.gen_range(-1.0..1.0));
            let cache = forward(&net, &x.view()).expect("forward");
            let clears_kink = net
                .layers()
                .iter()
                .zip(0..)
                .filter(|(l, _)| l.activation == Activation::Relu)
                .all(|(_, i)| cache.preact_abs_min(i) > 1e-3);
            // Feature rows near zero make the normalization chain stiff.
            let norms_ok = cache.feature_norms.iter().all(|&n| n > 1e-2);
            if !(clears_kink && norms_ok) {
                continue;
            }
            let labels: Vec<usize> = (0..n_points).map(|_| rng.gen_range(0..n_classes)).collect();
            let anchor_class: Vec<usize> =
                (0..n_points).map(|_| rng.gen_range(0..n_classes)).collect();
            let queues: Vec<MomentumQueue> = (0..n_classes)
                .map(|k| {
                    let c = ClassCentroid {
                        mu_src: ndarray::Array1::from_shape_fn(5, |d| {
                            ((k * 5 + d) as f64 * 0.9).cos() * 0.5
                        }),
                        sigma_src: ndarray::Array1::from_elem(5, 0.25),
                        live_mean: ndarray::Array1::zeros(5),
                    };
                    let bank = PseudoSourceBank::sample(&c, 10, &mut rng).expect("bank");
                    MomentumQueue::from_bank(&bank)
                })
                .collect();
            return GradCheckInstance {
                net,
                x,
                labels,
                anchor_class,
                stack: QueueStack::from_queues(&queues),
            };
        }
        panic!("could not draw a kink-free gradcheck instance");
    }

    fn n_classes(&self) -> usize {
        self.net.n_classes()
    }

    /// Scalar loss at the given parameters.
    fn loss_value(&self, net: &Network, loss: NamedLoss) -> Result<f64> {
        let cache = forward(net, &self.x.view())?;
        let ce = || -> Result<f64> {
            Ok(cross_entropy(&cache.logits.view(), &cache.probs.view(), &self.labels)?.0)
        };
        let cts = |form| -> Result<f64> {
            let anchors = self.anchors_by_class(&cache.z);
            Ok(total_contrastive(&anchors, &self.stack, form)?.0)
        };
        match loss {
            NamedLoss::CrossEntropy => ce(),
            NamedLoss::Contrastive(form) => cts(form),
            NamedLoss::Combined { lambda_cts, form } => Ok(ce()? + lambda_cts * cts(form)?),
        }
    }

    fn anchors_by_class(&self, z: &Array2<f64>) -> Vec<Array2<f64>> {
        let f = z.ncols();
        (0..self.n_classes())
            .map(|k| {
                let rows: Vec<usize> = self
                    .anchor_class
                    .iter()
                    .enumerate()
                    .filter(|(_, &c)| c == k)
                    .map(|(i, _)| i)
                    .collect();
                let mut m = Array2::zeros((rows.len(), f));
                for (r, &i) in rows.iter().enumerate() {
                    m.row_mut(r).assign(&z.row(i));
                }
                m
            })
            .collect()
    }

    /// Analytic parameter gradients via the backward pass.
    pub fn analytic_gradients(&self, loss: NamedLoss) -> Result<Gradients> {
        let cache = forward(&self.net, &self.x.view())?;
        let n = cache.n_points();
        let f = self.net.feature_dim();
        let zero_logits = Array2::zeros((n, self.n_classes()));
        let zero_feats = Array2::zeros((n, f));
        let (d_logits, d_feats) = match loss {
            NamedLoss::CrossEntropy => (
                cross_entropy(&cache.logits.view(), &cache.probs.view(), &self.labels)?.1,
                zero_feats,
            ),
            NamedLoss::Contrastive(form) => {
                (zero_logits, self.scatter_contrastive(&cache.z, form, 1.0)?)
            }
            NamedLoss::Combined { lambda_cts, form } => (
                cross_entropy(&cache.logits.view(), &cache.probs.view(), &self.labels)?.1,
                self.scatter_contrastive(&cache.z, form, lambda_cts)?,
            ),
        };
        backward(&self.net, &cache, &d_logits.view(), &d_feats.view())
    }

    fn scatter_contrastive(
        &self,
        z: &Array2<f64>,
        form: ContrastiveForm,
        scale: f64,
    ) -> Result<Array2<f64>> {
        let anchors = self.anchors_by_class(z);
        let (_, grads) = total_contrastive(&anchors, &self.stack, form)?;
        let mut d = Array2::zeros(z.raw_dim());
        for (k, grad) in grads.iter().enumerate() {
            let rows: Vec<usize> = self
                .anchor_class
                .iter()
                .enumerate()
                .filter(|(_, &c)| c == k)
                .map(|(i, _)| i)
                .collect();
            for (r, &i) in rows.iter().enumerate() {
                for c in 0..d.ncols() {
                    d[[i, c]] += scale * grad[[r, c]];
                }
            }
        }
        Ok(d)
    }
}

/// Compares analytic and central-difference gradients over every parameter.
pub fn grad_check(inst: &GradCheckInstance, loss: NamedLoss, eps: f64) -> Result<GradCheckReport> {
    let analytic = inst.analytic_gradients(loss)?;
    let flat_analytic: Vec<f64> = analytic
        .layers
        .iter()
        .flat_map(|(w, b)| w.iter().chain(b.iter()).cloned().collect::<Vec<_>>())
        .collect();
    let count = inst.net.param_count();
    let mut max_rel: f64 = 0.0;
    let mut net = inst.net.clone();
    for i in 0..count {
        let orig = net.get_param(i);
        net.set_param(i, orig + eps);
        let up = inst.loss_value(&net, loss)?;
        net.set_param(i, orig - eps);
        let down = inst.loss_value(&net, loss)?;
        net.set_param(i, orig);
        let numeric = (up - down) / (2.0 * eps);
        max_rel = max_rel.max(rel_error(flat_analytic[i], numeric, 1e-6));
    }
    Ok(GradCheckReport {
        loss: loss.to_string(),
        max_rel_error: max_rel,
        params_checked: count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_gradcheck() {
        for seed in 0..5 {
            let inst = GradCheckInstance::random(seed);
            let rep = grad_check(&inst, NamedLoss::CrossEntropy, 1e-5).unwrap();
            assert!(rep.max_rel_error < 1e-4, "seed {seed}: {}", rep.max_rel_error);
        }
    }

    #[test]
    fn contrastive_gradcheck_both_forms() {
        for seed in 0..5 {
            let inst = GradCheckInstance::random(100 + seed);
            for form in [ContrastiveForm::LogRatio, ContrastiveForm::Literal] {
                let rep = grad_check(&inst, NamedLoss::Contrastive(form), 1e-5).unwrap();
                assert!(
                    rep.max_rel_error < 1e-4,
                    "seed {seed} {form:?}: {}",
                    rep.max_rel_error
                );
            }
        }
    }

    #[test]
    fn combined_gradcheck() {
        for seed in 0..5 {
            let inst = GradCheckInstance::random(200 + seed);
            let rep = grad_check(
                &inst,
                NamedLoss::Combined {
                    lambda_cts: 1.0,
                    form: ContrastiveForm::LogRatio,
                },
                1e-5,
            )
            .unwrap();
            assert!(rep.max_rel_error < 1e-4, "seed {seed}: {}", rep.max_rel_error);
        }
    }

    #[test]
    fn combined_with_zero_lambda_reduces_to_cross_entropy() {
        let inst = GradCheckInstance::random(300);
        let a = inst.analytic_gradients(NamedLoss::CrossEntropy).unwrap();
        let b = inst
            .analytic_gradients(NamedLoss::Combined {
                lambda_cts: 0.0,
                form: ContrastiveForm::LogRatio,
            })
            .unwrap();
        for ((wa, ba), (wb, bb)) in a.layers.iter().zip(&b.layers) {
            assert_eq!(wa, wb);
            assert_eq!(ba, bb);
        }
    }
}
