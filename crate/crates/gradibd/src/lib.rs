//! Patient diagnosis trajectories as temporally directed graphs, plus a
//! context-aware, time-decay message-passing classifier for binary
//! disease-risk detection.
//!
//! The pipeline: raw ICD code sequences are truncated to chapter level
//! ([`codec`]), bucketized into sparse code-frequency matrices
//! ([`bucket`]), compressed into per-patient directed acyclic graphs
//! ([`graph`]), and classified by a small graph network ([`model`])
//! trained with reverse-mode autodiff ([`diff`]) under stratified
//! cross-validation ([`train`]).

pub mod bucket;
pub mod checkpoint;
pub mod codec;
pub mod cohort;
pub mod config;
pub mod diff;
pub mod graph;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod selftest;
pub mod train;

pub use bucket::BucketMatrix;
pub use codec::CodeVocab;
pub use cohort::{CohortRecord, SynthConfig, Visit};
pub use diff::Tape;
pub use config::RunConfig;
pub use graph::{GraphStats, IcdGraph};
pub use model::{ModelConfig, ModelParams};
pub use train::{EvalReport, TrainConfig};

/// Tool version reported by the CLI and stamped into manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
