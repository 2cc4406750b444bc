//! Anomaly detection for system logs that never decompresses its input.
//!
//! The crate covers the full pipeline: a streaming window-block compressor
//! whose output format makes anomalies visible as literal runs, dataset
//! ingestion and windowing, a seeded synthetic corpus generator, a byte-level
//! neural detector over compressed streams, self-supervised pretraining,
//! supervised finetuning, evaluation, and a CLI that wires the stages
//! together deterministically.

pub mod cli;
pub mod compressor;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod finetune;
pub mod ingest;
pub mod losses;
pub mod model;
pub mod optim;
pub mod pretrain;
pub mod sampler;
pub mod seeding;
pub mod synthgen;

pub use error::{Error, Result};
