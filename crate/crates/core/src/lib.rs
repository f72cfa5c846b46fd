//! Desk-scale lab for continual multi-modal test-time adaptation.
//!
//! Two per-point modalities (an appearance feature vector and a 3D
//! coordinate) stream through scheduled domain shifts. A student/teacher
//! pair per modality adapts online: teacher predictions on raw and augmented
//! inputs are fused by centroid-similarity weights within each modality,
//! then across modalities into pseudo-labels; confident student features
//! feed class-wise momentum queues that stochastically replay pseudo-source
//! features so the class centroids track the target domain without
//! forgetting the source.

pub mod adapter;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod memory;
pub mod numeric;
pub mod stream;
pub mod substrate;

pub use error::{Error, Result};
