//! Grid runs: augmentation-count grid and hyper-parameter sensitivity sweeps.

use std::path::Path;
use std::sync::Arc;

use crate::adapter::MethodVariant;
use crate::error::{Error, Result};
use crate::harness::expconfig::{AblationMode, ExperimentConfig};
use crate::harness::runner::{execute_run, pretrain_for_seed};
use crate::stream::{make_stream, pretrain_default, PointBatch, PretrainOutcome};

/// `n` evenly spaced appearance scale factors in [0.5, 1).
pub fn evenly_spaced_scales(n: usize) -> Vec<f64> {
    let step = 0.5 / n as f64;
    (0..n).map(|i| 0.5 + i as f64 * step).collect()
}

/// `n` evenly spaced z-rotation angles in (0, 360) degrees.
pub fn evenly_spaced_angles_deg(n: usize) -> Vec<f64> {
    let step = 360.0 / (n + 1) as f64;
    (1..=n).map(|i| i as f64 * step).collect()
}

struct Prepared {
    seed: u64,
    pretrained: Arc<PretrainOutcome>,
    stream: Arc<Vec<PointBatch>>,
}

fn prepare(cfg: &ExperimentConfig) -> Result<Vec<Prepared>> {
    let segments = cfg.effective_segments();
    cfg.run
        .seeds
        .iter()
        .map(|&seed| {
            let pcfg = pretrain_for_seed(&cfg.pretrain, seed);
            Ok(Prepared {
                seed,
                pretrained: Arc::new(pretrain_default(&cfg.world, &pcfg)?),
                stream: Arc::new(make_stream(&cfg.world, &segments, seed)?),
            })
        })
        .collect()
}

/// Mean overall (mIoU, accuracy) of the full method over the prepared seeds
/// with a modified adapter config.
fn grid_cell(
    cfg: &ExperimentConfig,
    prepared: &[Prepared],
    modify: &dyn Fn(&mut crate::adapter::AdapterConfig),
) -> Result<(f64, f64)> {
    let segments = cfg.effective_segments();
    let mut adapter_cfg = cfg.adapter.clone();
    modify(&mut adapter_cfg);
    adapter_cfg.validate()?;
    let mut mious = Vec::new();
    let mut accs = Vec::new();
    for p in prepared {
        let result = execute_run(
            &adapter_cfg,
            MethodVariant::Comac,
            p.seed,
            &p.pretrained,
            &p.stream,
            &segments,
            None,
            false,
        )?;
        mious.push(result.overall.miou);
        accs.push(result.overall.accuracy);
    }
    let n = mious.len() as f64;
    Ok((mious.iter().sum::<f64>() / n, accs.iter().sum::<f64>() / n))
}

/// Runs the configured grid and writes its CSV into `out_dir`. Returns the
/// written file path.
pub fn ablate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<std::path::PathBuf> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let prepared = prepare(cfg)?;
    match cfg.ablation.mode {
        AblationMode::Augmentation => {
            let rows = &cfg.ablation.n_aug_3d;
            let cols = &cfg.ablation.n_aug_2d;
            if rows.is_empty() || cols.is_empty() {
                return Err(Error::config("augmentation grid axes must not be empty"));
            }
            let mut csv = String::from("n_aug_3d/n_aug_2d");
            for c in cols {
                csv.push_str(&format!(",{c}"));
            }
            csv.push('\n');
            for &r in rows {
                csv.push_str(&r.to_string());
                for &c in cols {
                    let (miou, _) = grid_cell(cfg, &prepared, &|a| {
                        a.aug_scales_2d = evenly_spaced_scales(c);
                        a.aug_angles_3d_deg = evenly_spaced_angles_deg(r);
                    })?;
                    csv.push_str(&format!(",{miou:.6}"));
                }
                csv.push('\n');
            }
            let path = out_dir.join("aug_grid.csv");
            std::fs::write(&path, csv)?;
            Ok(path)
        }
        AblationMode::Sensitivity => {
            let axes: [(&str, &[f64]); 3] = [
                ("p_rs", &cfg.ablation.p_rs),
                ("tau_cf", &cfg.ablation.tau_cf),
                ("lambda_cts", &cfg.ablation.lambda_cts),
            ];
            if axes.iter().all(|(_, v)| v.is_empty()) {
                return Err(Error::config("sensitivity sweep axes must not be empty"));
            }
            let mut csv = String::from("param,value,miou,accuracy\n");
            let (miou, acc) = grid_cell(cfg, &prepared, &|_| {})?;
            csv.push_str(&format!("default,-,{miou:.6},{acc:.6}\n"));
            for (name, values) in axes {
                for &v in values {
                    let (miou, acc) = grid_cell(cfg, &prepared, &|a| match name {
                        "p_rs" => a.p_rs = v,
                        "tau_cf" => a.tau_cf = v,
                        _ => a.lambda_cts = v,
                    })?;
                    csv.push_str(&format!("{name},{v},{miou:.6},{acc:.6}\n"));
                }
            }
            let path = out_dir.join("sensitivity.csv");
            std::fs::write(&path, csv)?;
            Ok(path)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_augmentation_lists_are_the_even_spacings() {
        assert_eq!(evenly_spaced_scales(4), vec![0.5, 0.625, 0.75, 0.875]);
        let angles = evenly_spaced_angles_deg(5);
        for (a, b) in angles.iter().zip([60.0, 120.0, 180.0, 240.0, 300.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(evenly_spaced_scales(1), vec![0.5]);
        assert_eq!(evenly_spaced_angles_deg(1), vec![180.0]);
    }
}
