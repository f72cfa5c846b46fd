//! Synthetic source domain, continual target stream, and pretraining.

pub mod pretrain;
pub mod world;

pub use pretrain::{pretrain, pretrain_default, PretrainConfig, PretrainOutcome};
pub use world::{
    augment, default_schedule, forgetting_schedule, make_source_dataset, make_stream, Corrupt2d,
    Corrupt3d, PointBatch, SegmentSpec, SourceDataset, WorldSpec,
};
