//! Fixed-capacity FIFO queues of normalized features, one per class and
//! modality, with stochastic pseudo-source restoration.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::memory::centroid::{PseudoSourceBank, RestorationPolicy};

/// Ring buffer holding exactly `capacity` unit-norm feature rows once
/// initialized. Every stored row carries a monotone insertion id so FIFO
/// order stays auditable.
#[derive(Debug, Clone)]
pub struct MomentumQueue {
    rows: Array2<f64>,
    ids: Vec<u64>,
    head: usize,
    next_id: u64,
}

impl MomentumQueue {
    /// Builds a full queue from a pseudo-source bank (rows copied in order).
    pub fn from_bank(bank: &PseudoSourceBank) -> Self {
        let cap = bank.len();
        MomentumQueue {
            rows: bank.rows.clone(),
            ids: (0..cap as u64).collect(),
            head: 0,
            next_id: cap as u64,
        }
    }

    pub fn capacity(&self) -> usize {
        self.rows.nrows()
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    /// Appends `feats` and evicts the same number of oldest rows.
    pub fn enqueue(&mut self, feats: &ArrayView2<f64>) -> Result<()> {
        let b = feats.nrows();
        if b > self.capacity() {
            return Err(Error::contract(format!(
                "cannot enqueue {b} rows into a queue of capacity {}",
                self.capacity()
            )));
        }
        if feats.ncols() != self.feature_dim() {
            return Err(Error::contract("feature width mismatch on enqueue"));
        }
        debug_assert!(feats.rows().into_iter().all(|r| {
            let n: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            (n - 1.0).abs() < 1e-6
        }));
        let cap = self.capacity();
        for row in feats.rows() {
            self.rows.row_mut(self.head).assign(&row);
            self.ids[self.head] = self.next_id;
            self.next_id += 1;
            self.head = (self.head + 1) % cap;
        }
        Ok(())
    }

    /// Rows oldest-first.
    pub fn fifo_rows(&self) -> Array2<f64> {
        let cap = self.capacity();
        let mut out = Array2::zeros((cap, self.feature_dim()));
        for i in 0..cap {
            out.row_mut(i).assign(&self.rows.row((self.head + i) % cap));
        }
        out
    }

    /// Insertion ids oldest-first.
    pub fn fifo_ids(&self) -> Vec<u64> {
        let cap = self.capacity();
        (0..cap).map(|i| self.ids[(self.head + i) % cap]).collect()
    }

    /// Storage-order view of the rows (order is deterministic but not FIFO).
    pub fn rows_storage(&self) -> ArrayView2<'_, f64> {
        self.rows.view()
    }

    /// Arithmetic mean of the stored rows.
    pub fn mean(&self) -> Result<Array1<f64>> {
        if self.is_empty() {
            return Err(Error::contract("centroid mean of empty queue"));
        }
        let inv = 1.0 / self.len() as f64;
        let mut mu = Array1::zeros(self.feature_dim());
        for row in self.rows.rows() {
            mu.zip_mut_with(&row, |m, &v| *m += v);
        }
        mu.mapv_inplace(|v| v * inv);
        Ok(mu)
    }
}

/// Draws the per-step restoring flag: restore when the uniform draw falls
/// below `p_rs` (so 0 never restores and 1 always restores).
pub fn restore_decision(p_rs: f64, rng: &mut impl Rng) -> bool {
    rng.gen::<f64>() < p_rs
}

/// Applies one step's queue transition in place.
///
/// The confident target features are always enqueued. On a restore step,
/// `n_enq` bank rows (sampled uniformly without replacement) are enqueued on
/// top, replaying source knowledge without discarding the step's target
/// update — so the queue mixes fresh target features with pseudo-source
/// anchors instead of oscillating between pure states. Returns the number of
/// rows enqueued.
pub fn apply_queue_update(
    queue: &mut MomentumQueue,
    target_feats: &ArrayView2<f64>,
    bank: &PseudoSourceBank,
    n_enq: usize,
    restore: bool,
    rng: &mut impl Rng,
) -> Result<usize> {
    queue.enqueue(target_feats)?;
    let mut count = target_feats.nrows();
    if restore {
        let picks = bank.sample_rows(n_enq, rng);
        queue.enqueue(&picks.view())?;
        count += picks.nrows();
    }
    Ok(count)
}

/// One-shot form of the update: draws the flag itself and returns the
/// target-updated queue, with restored pseudo-source rows on top when the
/// flag fires.
pub fn maybe_restore(
    mut target_updated: MomentumQueue,
    bank: &PseudoSourceBank,
    policy: &RestorationPolicy,
    rng: &mut impl Rng,
) -> Result<(MomentumQueue, bool)> {
    if !restore_decision(policy.p_rs, rng) {
        return Ok((target_updated, false));
    }
    let picks = bank.sample_rows(policy.n_enq, rng);
    target_updated.enqueue(&picks.view())?;
    Ok((target_updated, true))
}
