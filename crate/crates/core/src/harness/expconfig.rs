//! Experiment configuration: a single TOML file drives pretraining,
//! adaptation runs, and ablation grids.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::adapter::{AdapterConfig, MethodVariant};
use crate::error::{Error, Result};
use crate::stream::{default_schedule, forgetting_schedule, PretrainConfig, SegmentSpec, WorldSpec};

/// Environment variable consulted for the default output directory.
pub const OUT_DIR_ENV: &str = "COMAC_OUT_DIR";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub variants: Vec<MethodVariant>,
    pub output_dir: Option<PathBuf>,
    /// 0 means one worker per CPU.
    pub workers: usize,
    pub write_traces: bool,
    /// Include live centroid means in the per-step trace records.
    pub trace_centroids: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seeds: vec![1, 2, 3, 4, 5],
            variants: vec![MethodVariant::Comac, MethodVariant::SourceOnly],
            output_dir: None,
            workers: 0,
            write_traces: false,
            trace_centroids: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Grid over the number of appearance and spatial augmentations.
    Augmentation,
    /// One-at-a-time sweeps of p_rs, tau_cf, and lambda_cts.
    Sensitivity,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationSection {
    pub mode: AblationMode,
    pub n_aug_2d: Vec<usize>,
    pub n_aug_3d: Vec<usize>,
    pub p_rs: Vec<f64>,
    pub tau_cf: Vec<f64>,
    pub lambda_cts: Vec<f64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            mode: AblationMode::Augmentation,
            n_aug_2d: vec![1, 2, 3, 4, 5],
            n_aug_3d: vec![1, 2, 3, 4, 5],
            p_rs: vec![0.3, 0.5, 0.7, 1.0],
            tau_cf: vec![0.0, 0.5, 0.8, 0.9],
            lambda_cts: vec![0.0, 0.01, 0.1, 1.0],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub world: WorldSpec,
    pub pretrain: PretrainConfig,
    /// Named schedule used when `segments` is empty: "default" or
    /// "forgetting".
    pub schedule: String,
    pub segments: Vec<SegmentSpec>,
    pub adapter: AdapterConfig,
    pub run: RunSection,
    pub ablation: AblationSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            world: WorldSpec::default(),
            pretrain: PretrainConfig::default(),
            schedule: "default".to_string(),
            segments: Vec::new(),
            adapter: AdapterConfig::default(),
            run: RunSection::default(),
            ablation: AblationSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.world.ensure_prototypes();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.adapter.validate()?;
        if self.run.seeds.is_empty() {
            return Err(Error::config("run.seeds must not be empty"));
        }
        if self.run.variants.is_empty() {
            return Err(Error::config("run.variants must not be empty"));
        }
        for s in &self.segments {
            s.validate(self.world.dim_2d)?;
        }
        if self.segments.is_empty() && !matches!(self.schedule.as_str(), "default" | "forgetting")
        {
            return Err(Error::config(format!(
                "unknown schedule '{}' (expected 'default' or 'forgetting')",
                self.schedule
            )));
        }
        Ok(())
    }

    /// The segment list actually streamed: explicit segments when given,
    /// otherwise the named built-in schedule.
    pub fn effective_segments(&self) -> Vec<SegmentSpec> {
        if !self.segments.is_empty() {
            return self.segments.clone();
        }
        match self.schedule.as_str() {
            "forgetting" => forgetting_schedule(&self.world),
            _ => default_schedule(&self.world),
        }
    }

    /// Output directory: explicit config value, else the environment
    /// variable, else `./results`.
    pub fn output_dir(&self) -> PathBuf {
        if let Some(dir) = &self.run.output_dir {
            return dir.clone();
        }
        if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
            if !dir.is_empty() {
                return PathBuf::from(dir);
            }
        }
        PathBuf::from("results")
    }

    /// A TOML dump of every default, prototypes included, as a ready-to-edit
    /// config file.
    pub fn defaults_toml() -> String {
        let mut cfg = ExperimentConfig::default();
        cfg.world.ensure_prototypes();
        cfg.segments = cfg.effective_segments();
        toml::to_string_pretty(&cfg).expect("defaults serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let text = ExperimentConfig::defaults_toml();
        let cfg: ExperimentConfig = toml::from_str(&text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.run.seeds, vec![1, 2, 3, 4, 5]);
        assert_eq!(cfg.adapter.n_q, 4096);
        assert_eq!(cfg.effective_segments().len(), 6);
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg: ExperimentConfig = toml::from_str(
            r#"
            [run]
            seeds = [7]
            variants = ["comac", "source_only"]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.run.seeds, vec![7]);
        assert_eq!(cfg.adapter.tau_cf, 0.8);
        assert_eq!(cfg.schedule, "default");
    }

    #[test]
    fn bad_variant_name_is_line_precise() {
        let err = toml::from_str::<ExperimentConfig>(
            "[run]\nseeds = [1]\nvariants = [\"nope\"]\n",
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn forgetting_schedule_selected_by_name() {
        let mut cfg = ExperimentConfig::default();
        cfg.schedule = "forgetting".into();
        let segs = cfg.effective_segments();
        assert_eq!(segs.last().unwrap().name, "return-clean");
    }
}
