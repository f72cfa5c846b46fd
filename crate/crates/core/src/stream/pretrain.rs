//! Source-domain pretraining of the two modality networks.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::argmax_rows;
use crate::stream::world::{make_source_dataset, SourceDataset, WorldSpec};
use crate::substrate::loss::cross_entropy;
use crate::substrate::{backward, forward, sgd_step, Modality, ModelPair, Network};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub n_samples: usize,
    pub holdout_fraction: f64,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            n_samples: 40,
            holdout_fraction: 0.25,
            epochs: 30,
            lr: 0.05,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub pair_2d: ModelPair,
    pub pair_3d: ModelPair,
    /// Normalized encoder features of all training points, grouped by class.
    pub features_2d: Vec<Array2<f64>>,
    pub features_3d: Vec<Array2<f64>>,
    pub holdout_accuracy: [f64; 2],
}

fn train_one(
    mut net: Network,
    data: &SourceDataset,
    modality: Modality,
    epochs: usize,
    lr: f64,
) -> Result<Network> {
    for epoch in 0..epochs {
        for batch in &data.train {
            let x = batch.modality(modality);
            let cache = forward(&net, &x)?;
            let (loss, d_logits) =
                cross_entropy(&cache.logits.view(), &cache.probs.view(), &batch.labels)?;
            if !loss.is_finite() {
                return Err(Error::divergence(format!(
                    "{} pretraining loss became non-finite at epoch {epoch}",
                    modality.label()
                )));
            }
            let d_feats = Array2::zeros((cache.n_points(), net.feature_dim()));
            let grads = backward(&net, &cache, &d_logits.view(), &d_feats.view())?;
            sgd_step(&mut net, &grads, lr)?;
        }
    }
    Ok(net)
}

fn accuracy(net: &Network, data: &[crate::stream::world::PointBatch], m: Modality) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for batch in data {
        let cache = forward(net, &batch.modality(m))?;
        let preds = argmax_rows(&cache.probs.view());
        correct += preds
            .iter()
            .zip(&batch.labels)
            .filter(|(p, y)| p == y)
            .count();
        total += batch.n_points();
    }
    Ok(correct as f64 / total.max(1) as f64)
}

fn features_by_class(
    net: &Network,
    data: &SourceDataset,
    m: Modality,
    n_classes: usize,
) -> Result<Vec<Array2<f64>>> {
    let f_dim = net.feature_dim();
    let mut rows: Vec<Vec<f64>> = vec![Vec::new(); n_classes];
    for batch in &data.train {
        let cache = forward(net, &batch.modality(m))?;
        for (j, &k) in batch.labels.iter().enumerate() {
            rows[k].extend(cache.z.row(j).iter());
        }
    }
    rows.into_iter()
        .enumerate()
        .map(|(k, flat)| {
            let n = flat.len() / f_dim;
            if n < 2 {
                return Err(Error::config(format!(
                    "class {k} has only {n} training features; cannot fit a centroid"
                )));
            }
            Array2::from_shape_vec((n, f_dim), flat)
                .map_err(|e| Error::config(format!("feature reshape failed: {e}")))
        })
        .collect()
}

/// Trains both students with cross-entropy on the labeled source set, copies
/// each into its teacher, and collects the per-class normalized features the
/// centroid construction needs.
pub fn pretrain(
    net_2d: Network,
    net_3d: Network,
    data: &SourceDataset,
    n_classes: usize,
    epochs: usize,
    lr: f64,
) -> Result<PretrainOutcome> {
    let net_2d = train_one(net_2d, data, Modality::Appearance2d, epochs, lr)?;
    let net_3d = train_one(net_3d, data, Modality::Geometry3d, epochs, lr)?;
    let holdout_accuracy = [
        accuracy(&net_2d, &data.holdout, Modality::Appearance2d)?,
        accuracy(&net_3d, &data.holdout, Modality::Geometry3d)?,
    ];
    let features_2d = features_by_class(&net_2d, data, Modality::Appearance2d, n_classes)?;
    let features_3d = features_by_class(&net_3d, data, Modality::Geometry3d, n_classes)?;
    Ok(PretrainOutcome {
        pair_2d: ModelPair::from_student(net_2d, Modality::Appearance2d),
        pair_3d: ModelPair::from_student(net_3d, Modality::Geometry3d),
        features_2d,
        features_3d,
        holdout_accuracy,
    })
}

/// Builds the source dataset and freshly initialized networks from the
/// config, then runs `pretrain`.
pub fn pretrain_default(spec: &WorldSpec, cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    let data = make_source_dataset(spec, cfg.n_samples, cfg.holdout_fraction, cfg.seed)?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    let net_2d = Network::default_arch(spec.dim_2d, spec.n_classes, &mut rng);
    let net_3d = Network::default_arch(spec.dim_3d, spec.n_classes, &mut rng);
    pretrain(net_2d, net_3d, &data, spec.n_classes, cfg.epochs, cfg.lr)
}
