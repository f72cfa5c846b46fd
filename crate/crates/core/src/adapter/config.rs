//! Adaptation hyper-parameters and method variants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::centroid::RestorationPolicy;
use crate::memory::contrastive::ContrastiveForm;

/// Which adaptation rule a run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodVariant {
    /// The full method: adaptive intra- and inter-modal fusion, queue
    /// updates with stochastic restoration, contrastive regularizer.
    Comac,
    /// Intra-modal prediction is the raw prediction (no augmentations).
    RawOnly,
    /// Intra-modal prediction is the augmentation average.
    AugOnly,
    /// Raw/augmented blend replaced by a simple average.
    NoImpa,
    /// Cross-modal blend replaced by a simple average.
    NoXmpf,
    /// Queues frozen: no target enqueue, centroids stay at source.
    NoUpdate,
    /// Restoration disabled: queues take every target update.
    NoRestore,
    /// Per-modality self-training on median-filtered hard pseudo-labels.
    Pslabel,
    /// Per-modality entropy minimization, classifier parameters only.
    EntropyMin,
    /// Inference with the pretrained models; no adaptation.
    SourceOnly,
}

impl MethodVariant {
    pub const ALL: [MethodVariant; 10] = [
        MethodVariant::Comac,
        MethodVariant::RawOnly,
        MethodVariant::AugOnly,
        MethodVariant::NoImpa,
        MethodVariant::NoXmpf,
        MethodVariant::NoUpdate,
        MethodVariant::NoRestore,
        MethodVariant::Pslabel,
        MethodVariant::EntropyMin,
        MethodVariant::SourceOnly,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            MethodVariant::Comac => "comac",
            MethodVariant::RawOnly => "raw_only",
            MethodVariant::AugOnly => "aug_only",
            MethodVariant::NoImpa => "no_impa",
            MethodVariant::NoXmpf => "no_xmpf",
            MethodVariant::NoUpdate => "no_update",
            MethodVariant::NoRestore => "no_restore",
            MethodVariant::Pslabel => "pslabel",
            MethodVariant::EntropyMin => "entropy_min",
            MethodVariant::SourceOnly => "source_only",
        }
    }

    /// Variants that run the fusion/queue pipeline (as opposed to the
    /// per-modality baselines).
    pub fn uses_queues(&self) -> bool {
        !matches!(
            self,
            MethodVariant::Pslabel | MethodVariant::EntropyMin | MethodVariant::SourceOnly
        )
    }
}

impl std::fmt::Display for MethodVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for MethodVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodVariant::ALL
            .iter()
            .find(|v| v.name() == s)
            .copied()
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown variant '{s}' (expected one of: {})",
                    MethodVariant::ALL.map(|v| v.name()).join(", ")
                ))
            })
    }
}

/// Which per-step prediction the metrics report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalOutput {
    /// Mean of the two teachers' raw softmax outputs. Comparable across all
    /// variants, so it is the headline default.
    SoftmaxAverage,
    /// The cross-modal fused prediction (falls back to the softmax average
    /// for variants that do not fuse).
    CrossModal,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    /// Teacher EMA momentum.
    pub lambda_s: f64,
    /// Contrastive loss coefficient.
    pub lambda_cts: f64,
    /// Student learning rate.
    pub lr: f64,
    /// Queue/bank capacity per class and modality.
    pub n_q: usize,
    /// Rows enqueued per restoration; also the per-class confident cap.
    pub n_enq: usize,
    /// Restoration probability per step.
    pub p_rs: f64,
    /// Confidence threshold for queue candidates.
    pub tau_cf: f64,
    /// Appearance augmentation scale factors.
    pub aug_scales_2d: Vec<f64>,
    /// Spatial augmentation z-rotation angles, degrees.
    pub aug_angles_3d_deg: Vec<f64>,
    pub contrastive_form: ContrastiveForm,
    pub eval_output: EvalOutput,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            lambda_s: 0.999,
            lambda_cts: 1.0,
            lr: 1e-3,
            n_q: 4096,
            n_enq: 200,
            p_rs: 0.5,
            tau_cf: 0.8,
            aug_scales_2d: vec![0.5, 0.625, 0.75, 0.875],
            aug_angles_3d_deg: vec![60.0, 120.0, 180.0, 240.0, 300.0],
            contrastive_form: ContrastiveForm::LogRatio,
            eval_output: EvalOutput::SoftmaxAverage,
        }
    }
}

impl AdapterConfig {
    pub fn restoration(&self) -> RestorationPolicy {
        RestorationPolicy {
            p_rs: self.p_rs,
            n_enq: self.n_enq,
            tau_cf: self.tau_cf,
        }
    }

    pub fn aug_angles_3d_rad(&self) -> Vec<f64> {
        self.aug_angles_3d_deg
            .iter()
            .map(|d| d * std::f64::consts::PI / 180.0)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_s) {
            return Err(Error::config("lambda_s must be in [0, 1]"));
        }
        if self.lambda_cts < 0.0 {
            return Err(Error::config("lambda_cts must be >= 0"));
        }
        if self.lr <= 0.0 {
            return Err(Error::config("lr must be positive"));
        }
        if self.n_q == 0 {
            return Err(Error::config("n_q must be positive"));
        }
        if self.n_enq > self.n_q {
            return Err(Error::config("n_enq cannot exceed n_q"));
        }
        self.restoration().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::str::FromStr;

    #[test]
    fn variant_names_round_trip() {
        for v in MethodVariant::ALL {
            assert_eq!(MethodVariant::from_str(v.name()).unwrap(), v);
        }
        assert!(MethodVariant::from_str("bogus").is_err());
    }

    #[test]
    fn default_config_is_valid() {
        AdapterConfig::default().validate().unwrap();
    }

    #[test]
    fn bad_configs_rejected() {
        let mut c = AdapterConfig::default();
        c.lambda_s = 1.5;
        assert!(c.validate().is_err());
        let mut c = AdapterConfig::default();
        c.n_enq = c.n_q + 1;
        assert!(c.validate().is_err());
    }
}
