//! The per-sample adaptation loop: teacher inference, fusion into
//! pseudo-labels, queue updates, student descent, teacher EMA — under the
//! one-pass protocol (each sample is predicted from the state entering its
//! step, then used for exactly one update).

pub mod config;

pub use config::{AdapterConfig, EvalOutput, MethodVariant};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::{
    intra_modal, teacher_predict, xmpf_fuse, IntraFusionMode, IntraModalResult, TeacherOutputs,
};
use crate::memory::centroid::select_confident;
use crate::memory::queue::restore_decision;
use crate::memory::{total_contrastive, ModalityMemory};
use crate::numeric::argmax_rows;
use crate::stream::world::PointBatch;
use crate::stream::{augment, PretrainOutcome};
use crate::substrate::loss::{cross_entropy, mean_entropy};
use crate::substrate::{backward, ema_update, forward, sgd_step, Modality, ModelPair};

/// Full adaptation state carried across steps.
#[derive(Debug, Clone)]
pub struct AdapterState {
    pub pairs: [ModelPair; 2],
    pub memory: [ModalityMemory; 2],
    pub t: usize,
    /// When set, step records carry the post-update live centroid means.
    pub trace_centroids: bool,
    n_classes: usize,
    rng_restore: ChaCha12Rng,
    rng_sample: ChaCha12Rng,
}

/// Per-step trace record (one JSON line in the run artifact).
#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub t: usize,
    pub segment: usize,
    pub n_points: usize,
    pub loss_ce: [f64; 2],
    pub loss_cts: [f64; 2],
    pub mean_w: [f64; 2],
    pub mean_w_aug: [f64; 2],
    pub mean_w_hat: [f64; 2],
    pub agreement: [f64; 2],
    pub restored: bool,
    pub enqueued: [Vec<usize>; 2],
    pub eval_correct: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub centroid_means: Option<[Vec<Vec<f64>>; 2]>,
}

impl StepRecord {
    fn empty(t: usize, segment: usize, n_points: usize, n_classes: usize) -> Self {
        StepRecord {
            t,
            segment,
            n_points,
            loss_ce: [0.0; 2],
            loss_cts: [0.0; 2],
            mean_w: [0.0; 2],
            mean_w_aug: [0.0; 2],
            mean_w_hat: [0.0; 2],
            agreement: [0.0; 2],
            restored: false,
            enqueued: [vec![0; n_classes], vec![0; n_classes]],
            eval_correct: 0,
            centroid_means: None,
        }
    }
}

/// What one step returns: both evaluation predictions (made before any
/// parameter update) and the trace record.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Softmax average of the two teachers' raw predictions.
    pub eval_softmax_avg: Array2<f64>,
    /// Cross-modal fused prediction, when the variant fuses.
    pub eval_cross_modal: Option<Array2<f64>>,
    pub record: StepRecord,
}

impl StepOutput {
    /// The prediction selected by `eval_output`, with the documented
    /// fallback to the softmax average for non-fusing variants.
    pub fn eval_probs(&self, mode: EvalOutput) -> &Array2<f64> {
        match mode {
            EvalOutput::SoftmaxAverage => &self.eval_softmax_avg,
            EvalOutput::CrossModal => {
                self.eval_cross_modal.as_ref().unwrap_or(&self.eval_softmax_avg)
            }
        }
    }
}

/// Builds the initial state: centroids from source features, banks sampled
/// around them, queues filled from the banks, teachers already copied from
/// the pretrained students.
pub fn init(pretrained: &PretrainOutcome, cfg: &AdapterConfig, seed: u64) -> Result<AdapterState> {
    cfg.validate()?;
    let n_classes = pretrained.pair_2d.student.n_classes();
    if pretrained.features_2d.len() != n_classes || pretrained.features_3d.len() != n_classes {
        return Err(Error::config(
            "source features must cover every class in both modalities",
        ));
    }
    let mut rng_bank = ChaCha12Rng::seed_from_u64(seed);
    rng_bank.set_stream(0xB0);
    let memory_2d = ModalityMemory::init(&pretrained.features_2d, cfg.n_q, &mut rng_bank)?;
    let memory_3d = ModalityMemory::init(&pretrained.features_3d, cfg.n_q, &mut rng_bank)?;
    let mut rng_restore = ChaCha12Rng::seed_from_u64(seed);
    rng_restore.set_stream(0xB1);
    let mut rng_sample = ChaCha12Rng::seed_from_u64(seed);
    rng_sample.set_stream(0xB2);
    Ok(AdapterState {
        pairs: [pretrained.pair_2d.clone(), pretrained.pair_3d.clone()],
        memory: [memory_2d, memory_3d],
        t: 0,
        trace_centroids: false,
        n_classes,
        rng_restore,
        rng_sample,
    })
}

fn aug_lists(cfg: &AdapterConfig, variant: MethodVariant) -> (Vec<f64>, Vec<f64>) {
    match variant {
        // Baselines and the raw-only ablation never consult augmented copies.
        MethodVariant::RawOnly
        | MethodVariant::Pslabel
        | MethodVariant::EntropyMin
        | MethodVariant::SourceOnly => (Vec::new(), Vec::new()),
        _ => (cfg.aug_scales_2d.clone(), cfg.aug_angles_3d_rad()),
    }
}

fn intra_mode(variant: MethodVariant) -> IntraFusionMode {
    match variant {
        MethodVariant::AugOnly => IntraFusionMode::AugOnly,
        MethodVariant::NoImpa => IntraFusionMode::SimpleAverage,
        // RawOnly runs with empty augmentation lists, which already makes
        // the adaptive blend collapse to the raw prediction exactly.
        _ => IntraFusionMode::Adaptive,
    }
}

/// Executes one adaptation step and returns the pre-update evaluation
/// prediction for the sample.
pub fn step(
    state: &mut AdapterState,
    batch: &PointBatch,
    cfg: &AdapterConfig,
    variant: MethodVariant,
) -> Result<StepOutput> {
    let t = state.t;
    state.t += 1;
    let n = batch.n_points();
    let mut record = StepRecord::empty(t, batch.segment_id, n, state.n_classes);

    // Teacher inference on raw and augmented inputs (state entering step t).
    let (scales, angles) = aug_lists(cfg, variant);
    let aug_2d = augment(batch, Modality::Appearance2d, &scales);
    let aug_3d = augment(batch, Modality::Geometry3d, &angles);
    let teach_2d = teacher_predict(
        &state.pairs[0].teacher,
        batch,
        Modality::Appearance2d,
        &aug_2d,
    )?;
    let teach_3d = teacher_predict(
        &state.pairs[1].teacher,
        batch,
        Modality::Geometry3d,
        &aug_3d,
    )?;

    // Softmax average of the two per-modality predictions. For variants that
    // run the intra-modal stage this is the mean of the fused predictions
    // (each modality's announced output); baselines average the raw teacher
    // outputs, which is the same thing for them.
    let mut eval_softmax_avg = teach_2d.p.clone();
    eval_softmax_avg += &teach_3d.p;
    eval_softmax_avg.mapv_inplace(|v| v * 0.5);

    let (eval_cross_modal, pseudo_labels) = if variant.uses_queues() {
        let mode = intra_mode(variant);
        let results: [IntraModalResult; 2] = [
            intra_modal(&teach_2d, &state.memory[0].live_means().view(), mode),
            intra_modal(&teach_3d, &state.memory[1].live_means().view(), mode),
        ];
        for (m, r) in results.iter().enumerate() {
            let (w, wa, wh, agree) = r.diagnostics();
            record.mean_w[m] = w;
            record.mean_w_aug[m] = wa;
            record.mean_w_hat[m] = wh;
            record.agreement[m] = agree;
        }
        eval_softmax_avg = results[0].p_fused.clone();
        eval_softmax_avg += &results[1].p_fused;
        eval_softmax_avg.mapv_inplace(|v| v * 0.5);
        let xm = xmpf_fuse(&results[0], &results[1], variant == MethodVariant::NoXmpf)?;
        (Some(xm.p_xm), Some(xm.labels))
    } else {
        (None, None)
    };

    // Headline correctness is always counted on the softmax average so the
    // trace stays comparable across variants.
    record.eval_correct = argmax_rows(&eval_softmax_avg.view())
        .iter()
        .zip(&batch.labels)
        .filter(|(p, y)| p == y)
        .count();

    match variant {
        MethodVariant::SourceOnly => {}
        MethodVariant::Pslabel => pslabel_update(state, batch, cfg, &teach_2d, &teach_3d, &mut record)?,
        MethodVariant::EntropyMin => entropy_update(state, batch, cfg, &mut record)?,
        _ => {
            let pseudo = pseudo_labels.as_ref().expect("fusing variant has labels");
            queue_variant_update(state, batch, cfg, variant, pseudo, &mut record)?;
        }
    }

    if state.trace_centroids && variant.uses_queues() {
        let dump = |mem: &ModalityMemory| -> Vec<Vec<f64>> {
            mem.centroids.iter().map(|c| c.live_mean.to_vec()).collect()
        };
        record.centroid_means = Some([dump(&state.memory[0]), dump(&state.memory[1])]);
    }

    Ok(StepOutput {
        eval_softmax_avg,
        eval_cross_modal,
        record,
    })
}

/// The queue-bearing update shared by comac and its ablations.
fn queue_variant_update(
    state: &mut AdapterState,
    batch: &PointBatch,
    cfg: &AdapterConfig,
    variant: MethodVariant,
    pseudo_labels: &[usize],
    record: &mut StepRecord,
) -> Result<()> {
    let policy = cfg.restoration();
    // One restoring flag per step, shared by every class queue in both
    // modalities. Drawn unconditionally so ablations that ignore it stay
    // step-for-step comparable with runs that take the branch.
    let gamma_restore = restore_decision(policy.p_rs, &mut state.rng_restore);
    let restore = gamma_restore
        && variant != MethodVariant::NoRestore
        && variant != MethodVariant::NoUpdate;
    record.restored = restore;

    for m in 0..2 {
        let modality = Modality::BOTH[m];
        let pair = &mut state.pairs[m];
        let cache = forward(&pair.student, &batch.modality(modality))?;
        let confident =
            select_confident(&cache.probs.view(), &cache.z.view(), state.n_classes, &policy);

        if variant != MethodVariant::NoUpdate {
            let enqueued =
                state.memory[m].step_update(&confident, restore, policy.n_enq, &mut state.rng_sample)?;
            record.enqueued[m] = enqueued;
        }

        let (ce_loss, d_logits) =
            cross_entropy(&cache.logits.view(), &cache.probs.view(), pseudo_labels)?;
        record.loss_ce[m] = ce_loss;

        let mut d_feats = Array2::zeros((cache.n_points(), pair.student.feature_dim()));
        if cfg.lambda_cts > 0.0 {
            let stack = state.memory[m].stack();
            let anchors: Vec<Array2<f64>> =
                confident.iter().map(|c| c.features.clone()).collect();
            let (cts_loss, grads) = total_contrastive(&anchors, &stack, cfg.contrastive_form)?;
            record.loss_cts[m] = cts_loss;
            for (set, grad) in confident.iter().zip(&grads) {
                for (r, &i) in set.indices.iter().enumerate() {
                    for c in 0..d_feats.ncols() {
                        d_feats[[i, c]] += cfg.lambda_cts * grad[[r, c]];
                    }
                }
            }
        }

        let total = record.loss_ce[m] + cfg.lambda_cts * record.loss_cts[m];
        if !total.is_finite() {
            return Err(Error::divergence(format!(
                "{} loss became non-finite at step {}",
                modality.label(),
                record.t
            )));
        }

        let grads = backward(&pair.student, &cache, &d_logits.view(), &d_feats.view())?;
        sgd_step(&mut pair.student, &grads, cfg.lr)?;
        ema_update(&mut pair.teacher, &pair.student, cfg.lambda_s)?;
    }
    Ok(())
}

/// Self-training baseline: hard teacher pseudo-labels, per-class median
/// confidence filter, cross-entropy on the surviving points.
fn pslabel_update(
    state: &mut AdapterState,
    batch: &PointBatch,
    cfg: &AdapterConfig,
    teach_2d: &TeacherOutputs,
    teach_3d: &TeacherOutputs,
    record: &mut StepRecord,
) -> Result<()> {
    for (m, teach) in [teach_2d, teach_3d].into_iter().enumerate() {
        let modality = Modality::BOTH[m];
        let labels = argmax_rows(&teach.p.view());
        let conf: Vec<f64> = labels.iter().enumerate().map(|(j, &k)| teach.p[[j, k]]).collect();
        let keep = median_filter(&labels, &conf, state.n_classes);
        if keep.is_empty() {
            continue;
        }
        let pair = &mut state.pairs[m];
        let cache = forward(&pair.student, &batch.modality(modality))?;
        let kept_logits = select_rows(&cache.logits, &keep);
        let kept_probs = select_rows(&cache.probs, &keep);
        let kept_labels: Vec<usize> = keep.iter().map(|&j| labels[j]).collect();
        let (loss, d_kept) =
            cross_entropy(&kept_logits.view(), &kept_probs.view(), &kept_labels)?;
        record.loss_ce[m] = loss;
        if !loss.is_finite() {
            return Err(Error::divergence(format!(
                "{} pslabel loss became non-finite at step {}",
                modality.label(),
                record.t
            )));
        }
        let mut d_logits = Array2::zeros(cache.logits.raw_dim());
        for (r, &j) in keep.iter().enumerate() {
            d_logits.row_mut(j).assign(&d_kept.row(r));
        }
        let d_feats = Array2::zeros((cache.n_points(), pair.student.feature_dim()));
        let grads = backward(&pair.student, &cache, &d_logits.view(), &d_feats.view())?;
        sgd_step(&mut pair.student, &grads, cfg.lr)?;
        ema_update(&mut pair.teacher, &pair.student, cfg.lambda_s)?;
    }
    Ok(())
}

/// Keeps the points whose confidence reaches the median of their predicted
/// class (so with distinct confidences and an even class count, exactly half
/// survive).
fn median_filter(labels: &[usize], conf: &[f64], n_classes: usize) -> Vec<usize> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (j, &k) in labels.iter().enumerate() {
        by_class[k].push(j);
    }
    let mut keep = Vec::new();
    for members in by_class {
        if members.is_empty() {
            continue;
        }
        let mut values: Vec<f64> = members.iter().map(|&j| conf[j]).collect();
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = values.len();
        let median = if n % 2 == 1 {
            values[n / 2]
        } else {
            0.5 * (values[n / 2 - 1] + values[n / 2])
        };
        keep.extend(members.into_iter().filter(|&j| conf[j] >= median));
    }
    keep.sort_unstable();
    keep
}

fn select_rows(m: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), m.ncols()));
    for (r, &j) in rows.iter().enumerate() {
        out.row_mut(r).assign(&m.row(j));
    }
    out
}

/// Entropy-minimization baseline: descend the mean prediction entropy of the
/// student on the raw input, updating only the classifier layer. The teacher
/// mirrors the student so evaluation tracks the adapting model.
fn entropy_update(
    state: &mut AdapterState,
    batch: &PointBatch,
    cfg: &AdapterConfig,
    record: &mut StepRecord,
) -> Result<()> {
    for m in 0..2 {
        let modality = Modality::BOTH[m];
        let pair = &mut state.pairs[m];
        let cache = forward(&pair.student, &batch.modality(modality))?;
        let (loss, d_logits) = mean_entropy(&cache.probs.view());
        record.loss_ce[m] = loss;
        if !loss.is_finite() {
            return Err(Error::divergence(format!(
                "{} entropy became non-finite at step {}",
                modality.label(),
                record.t
            )));
        }
        let d_feats = Array2::zeros((cache.n_points(), pair.student.feature_dim()));
        let mut grads = backward(&pair.student, &cache, &d_logits.view(), &d_feats.view())?;
        let last = grads.layers.len() - 1;
        for (i, (w, b)) in grads.layers.iter_mut().enumerate() {
            if i != last {
                w.fill(0.0);
                b.fill(0.0);
            }
        }
        sgd_step(&mut pair.student, &grads, cfg.lr)?;
        pair.teacher = pair.student.clone();
    }
    Ok(())
}

/// Everything a finished run exposes to the metrics harness.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub records: Vec<StepRecord>,
    /// Headline per-step evaluation probabilities (selected eval mode).
    pub eval_probs: Vec<Array2<f64>>,
    pub pred_labels: Vec<Vec<usize>>,
    /// Accuracy of the non-headline eval mode, per step, for the trace.
    pub alt_correct: Vec<usize>,
}

/// Runs the one-pass protocol over a finite stream: each sample is predicted
/// with the state entering its step and visited exactly once.
pub fn run_sequence(
    state: &mut AdapterState,
    stream: &[PointBatch],
    cfg: &AdapterConfig,
    variant: MethodVariant,
) -> Result<RunOutcome> {
    let mut records = Vec::with_capacity(stream.len());
    let mut eval_probs = Vec::with_capacity(stream.len());
    let mut pred_labels = Vec::with_capacity(stream.len());
    let mut alt_correct = Vec::with_capacity(stream.len());
    for batch in stream {
        let out = step(state, batch, cfg, variant)?;
        let headline = out.eval_probs(cfg.eval_output).clone();
        let preds = argmax_rows(&headline.view());
        let alt_mode = match cfg.eval_output {
            EvalOutput::SoftmaxAverage => EvalOutput::CrossModal,
            EvalOutput::CrossModal => EvalOutput::SoftmaxAverage,
        };
        let alt = argmax_rows(&out.eval_probs(alt_mode).view())
            .iter()
            .zip(&batch.labels)
            .filter(|(p, y)| p == y)
            .count();
        records.push(out.record);
        eval_probs.push(headline);
        pred_labels.push(preds);
        alt_correct.push(alt);
    }
    Ok(RunOutcome {
        records,
        eval_probs,
        pred_labels,
        alt_correct,
    })
}
