//! Source centroids, pseudo-source banks, class-wise momentum queues, and
//! the contrastive regularizer built on them.

pub mod centroid;
pub mod contrastive;
pub mod queue;

pub use centroid::{
    build_source_centroids, sample_gaussian_rows, select_confident, ClassCentroid, ConfidentSet,
    PseudoSourceBank, RestorationPolicy,
};
pub use contrastive::{class_contrastive, total_contrastive, ContrastiveForm, QueueStack};
pub use queue::{apply_queue_update, maybe_restore, restore_decision, MomentumQueue};

use ndarray::Array2;
use rand::Rng;

use crate::error::Result;

/// Per-modality memory: one centroid, bank, and queue per class, plus the
/// live means the fusion stage reads.
#[derive(Debug, Clone)]
pub struct ModalityMemory {
    pub centroids: Vec<ClassCentroid>,
    pub banks: Vec<PseudoSourceBank>,
    pub queues: Vec<MomentumQueue>,
}

impl ModalityMemory {
    /// Builds centroids from per-class source features, samples the banks,
    /// fills the queues from them, and sets each live mean to its queue mean.
    pub fn init(
        features_by_class: &[Array2<f64>],
        n_q: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut centroids = build_source_centroids(features_by_class)?;
        let mut banks = Vec::with_capacity(centroids.len());
        let mut queues = Vec::with_capacity(centroids.len());
        for c in &centroids {
            let bank = PseudoSourceBank::sample(c, n_q, rng)?;
            queues.push(MomentumQueue::from_bank(&bank));
            banks.push(bank);
        }
        for (c, q) in centroids.iter_mut().zip(&queues) {
            c.live_mean = q.mean()?;
        }
        Ok(ModalityMemory {
            centroids,
            banks,
            queues,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.centroids.len()
    }

    /// Live means stacked as one row per class.
    pub fn live_means(&self) -> Array2<f64> {
        let f = self.centroids[0].live_mean.len();
        let mut m = Array2::zeros((self.n_classes(), f));
        for (k, c) in self.centroids.iter().enumerate() {
            m.row_mut(k).assign(&c.live_mean);
        }
        m
    }

    /// Applies one step's queue transition for every class and refreshes the
    /// live means of the queues that changed. Returns per-class enqueued
    /// counts.
    pub fn step_update(
        &mut self,
        confident: &[ConfidentSet],
        restore: bool,
        n_enq: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<usize>> {
        let mut enqueued = vec![0usize; self.n_classes()];
        for k in 0..self.n_classes() {
            let count = apply_queue_update(
                &mut self.queues[k],
                &confident[k].features.view(),
                &self.banks[k],
                n_enq,
                restore,
                rng,
            )?;
            enqueued[k] = count;
            if count > 0 {
                self.centroids[k].live_mean = self.queues[k].mean()?;
            }
        }
        Ok(enqueued)
    }

    pub fn stack(&self) -> QueueStack {
        QueueStack::from_queues(&self.queues)
    }
}
