//! Executes the (variant x seed) run grid and writes the result files.
//!
//! Every variant at a given seed consumes the identical stream (paired
//! design); pretraining happens once per seed and is shared.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::adapter::{self, AdapterConfig, MethodVariant};
use crate::error::{Error, Result};
use crate::harness::expconfig::ExperimentConfig;
use crate::harness::metrics::{ConfusionMatrix, SegmentMetrics};
use crate::stream::{make_stream, pretrain_default, PointBatch, PretrainConfig, PretrainOutcome, SegmentSpec};

#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub variant: MethodVariant,
    pub seed: u64,
    pub segments: Vec<SegmentMetrics>,
    pub overall: SegmentMetrics,
    pub wall_s: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunFailure {
    pub variant: MethodVariant,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub results: Vec<RunResult>,
    pub failures: Vec<RunFailure>,
}

/// Label used in the CSV segment column; the overall row uses "overall".
pub fn segment_label(index: usize, name: &str) -> String {
    format!("{index}:{name}")
}

/// Pretraining seed for one run seed (kept distinct across run seeds while
/// still controlled by the configured base seed).
pub fn pretrain_for_seed(base: &PretrainConfig, run_seed: u64) -> PretrainConfig {
    PretrainConfig {
        seed: base.seed.wrapping_add(run_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        ..base.clone()
    }
}

/// One adaptation run over a prepared stream, reduced to per-segment and
/// overall metrics.
pub fn execute_run(
    adapter_cfg: &AdapterConfig,
    variant: MethodVariant,
    seed: u64,
    pretrained: &PretrainOutcome,
    stream: &[PointBatch],
    segments: &[SegmentSpec],
    trace: Option<&mut Vec<u8>>,
    trace_centroids: bool,
) -> Result<RunResult> {
    let t0 = Instant::now();
    let n_classes = pretrained.pair_2d.student.n_classes();
    let mut state = adapter::init(pretrained, adapter_cfg, seed)?;
    state.trace_centroids = trace_centroids;
    let outcome = adapter::run_sequence(&mut state, stream, adapter_cfg, variant)?;

    let mut seg_cm: Vec<ConfusionMatrix> = segments
        .iter()
        .map(|_| ConfusionMatrix::new(n_classes))
        .collect();
    let mut seg_alt = vec![0usize; segments.len()];
    for (batch, (pred, alt)) in stream
        .iter()
        .zip(outcome.pred_labels.iter().zip(&outcome.alt_correct))
    {
        seg_cm[batch.segment_id].record(pred, &batch.labels)?;
        seg_alt[batch.segment_id] += alt;
    }

    let mut overall_cm = ConfusionMatrix::new(n_classes);
    let mut per_segment = Vec::with_capacity(segments.len());
    let mut alt_total = 0usize;
    for (i, (cm, seg)) in seg_cm.iter().zip(segments).enumerate() {
        overall_cm.merge(cm);
        alt_total += seg_alt[i];
        per_segment.push(SegmentMetrics {
            index: Some(i),
            name: seg.name.clone(),
            n_points: cm.total(),
            accuracy: cm.accuracy(),
            miou: cm.miou(),
            per_class_iou: cm.per_class_iou(),
            alt_accuracy: seg_alt[i] as f64 / cm.total().max(1) as f64,
        });
    }
    let overall = SegmentMetrics {
        index: None,
        name: "overall".to_string(),
        n_points: overall_cm.total(),
        accuracy: overall_cm.accuracy(),
        miou: overall_cm.miou(),
        per_class_iou: overall_cm.per_class_iou(),
        alt_accuracy: alt_total as f64 / overall_cm.total().max(1) as f64,
    };

    if let Some(buf) = trace {
        for record in &outcome.records {
            serde_json::to_writer(&mut *buf, record)
                .map_err(|e| Error::config(format!("trace serialization failed: {e}")))?;
            buf.push(b'\n');
        }
    }

    Ok(RunResult {
        variant,
        seed,
        segments: per_segment,
        overall,
        wall_s: t0.elapsed().as_secs_f64(),
    })
}

/// Executes every (variant x seed) cell of the config and writes
/// `summary.csv`, `summary.json`, and optional step traces under the output
/// directory. Failed runs are recorded and do not abort the rest.
pub fn run(cfg: &ExperimentConfig) -> Result<Summary> {
    cfg.validate()?;
    let out_dir = cfg.output_dir();
    std::fs::create_dir_all(&out_dir)?;
    let segments = cfg.effective_segments();

    // Pretrain once per seed, then stream once per seed.
    let mut prepared: Vec<(u64, Arc<PretrainOutcome>, Arc<Vec<PointBatch>>)> = Vec::new();
    for &seed in &cfg.run.seeds {
        let pcfg = pretrain_for_seed(&cfg.pretrain, seed);
        let pretrained = Arc::new(pretrain_default(&cfg.world, &pcfg)?);
        let stream = Arc::new(make_stream(&cfg.world, &segments, seed)?);
        prepared.push((seed, pretrained, stream));
    }

    let plan: Vec<(MethodVariant, usize)> = cfg
        .run
        .variants
        .iter()
        .flat_map(|&v| (0..prepared.len()).map(move |i| (v, i)))
        .collect();

    let workers = if cfg.run.workers == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        cfg.run.workers
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config(format!("worker pool: {e}")))?;

    let runs: Vec<std::result::Result<(RunResult, Option<Vec<u8>>), RunFailure>> =
        pool.install(|| {
            use rayon::prelude::*;
            plan.par_iter()
                .map(|&(variant, idx)| {
                    let (seed, pretrained, stream) = &prepared[idx];
                    let mut trace_buf = cfg.run.write_traces.then(Vec::new);
                    execute_run(
                        &cfg.adapter,
                        variant,
                        *seed,
                        pretrained,
                        stream,
                        &segments,
                        trace_buf.as_mut(),
                        cfg.run.trace_centroids,
                    )
                    .map(|r| (r, trace_buf))
                    .map_err(|e| RunFailure {
                        variant,
                        seed: *seed,
                        message: e.to_string(),
                    })
                })
                .collect()
        });

    let mut results = Vec::new();
    let mut failures = Vec::new();
    for item in runs {
        match item {
            Ok((result, trace_buf)) => {
                if let Some(buf) = trace_buf {
                    let path = out_dir.join("runs").join(format!(
                        "{}_s{}.jsonl",
                        result.variant.name(),
                        result.seed
                    ));
                    std::fs::create_dir_all(path.parent().unwrap())?;
                    std::fs::write(&path, buf)?;
                }
                results.push(result);
            }
            Err(failure) => failures.push(failure),
        }
    }

    let summary = Summary { results, failures };
    write_summary_csv(&summary, &out_dir.join("summary.csv"))?;
    write_summary_json(&summary, &out_dir.join("summary.json"))?;
    Ok(summary)
}

pub fn write_summary_csv(summary: &Summary, path: &Path) -> Result<()> {
    let mut out = String::from("variant,seed,segment,accuracy,miou\n");
    for r in &summary.results {
        for seg in &r.segments {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6}\n",
                r.variant.name(),
                r.seed,
                segment_label(seg.index.unwrap(), &seg.name),
                seg.accuracy,
                seg.miou
            ));
        }
        out.push_str(&format!(
            "{},{},overall,{:.6},{:.6}\n",
            r.variant.name(),
            r.seed,
            r.overall.accuracy,
            r.overall.miou
        ));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct VariantAggregate {
    overall_accuracy_mean: f64,
    overall_miou_mean: f64,
    per_seed_overall_accuracy: Vec<f64>,
    per_seed_overall_miou: Vec<f64>,
    segments: BTreeMap<String, SegmentAggregate>,
}

#[derive(Debug, Clone, Serialize)]
struct SegmentAggregate {
    accuracy_mean: f64,
    miou_mean: f64,
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

pub fn write_summary_json(summary: &Summary, path: &Path) -> Result<()> {
    let mut aggregates: BTreeMap<String, VariantAggregate> = BTreeMap::new();
    let mut variants: Vec<MethodVariant> = summary.results.iter().map(|r| r.variant).collect();
    variants.dedup();
    for variant in variants {
        let runs: Vec<&RunResult> = summary
            .results
            .iter()
            .filter(|r| r.variant == variant)
            .collect();
        if runs.is_empty() {
            continue;
        }
        let acc: Vec<f64> = runs.iter().map(|r| r.overall.accuracy).collect();
        let miou: Vec<f64> = runs.iter().map(|r| r.overall.miou).collect();
        let mut segments = BTreeMap::new();
        for (i, seg) in runs[0].segments.iter().enumerate() {
            let label = segment_label(i, &seg.name);
            let seg_acc: Vec<f64> = runs.iter().map(|r| r.segments[i].accuracy).collect();
            let seg_miou: Vec<f64> = runs.iter().map(|r| r.segments[i].miou).collect();
            segments.insert(
                label,
                SegmentAggregate {
                    accuracy_mean: mean(&seg_acc),
                    miou_mean: mean(&seg_miou),
                },
            );
        }
        aggregates.insert(
            variant.name().to_string(),
            VariantAggregate {
                overall_accuracy_mean: mean(&acc),
                overall_miou_mean: mean(&miou),
                per_seed_overall_accuracy: acc,
                per_seed_overall_miou: miou,
                segments,
            },
        );
    }

    #[derive(Serialize)]
    struct SummaryFile<'a> {
        results: &'a [RunResult],
        aggregates: BTreeMap<String, VariantAggregate>,
        failures: &'a [RunFailure],
    }

    let file = SummaryFile {
        results: &summary.results,
        aggregates,
        failures: &summary.failures,
    };
    let json = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::config(format!("summary serialization failed: {e}")))?;
    std::fs::write(path, json)?;
    Ok(())
}
