//! Experiment orchestration: config, run grid, metrics, reports, selftest.

pub mod ablate;
pub mod expconfig;
pub mod metrics;
pub mod report;
pub mod runner;
pub mod selftest;

pub use ablate::{ablate, evenly_spaced_angles_deg, evenly_spaced_scales};
pub use expconfig::{AblationMode, ExperimentConfig, RunSection, OUT_DIR_ENV};
pub use metrics::{compute_miou, ConfusionMatrix, SegmentMetrics};
pub use runner::{execute_run, run, RunResult, Summary};
pub use selftest::{selftest, SelftestReport};
