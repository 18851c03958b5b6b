//! Desk-scale federated LoRA fine-tuning for the three code-review tasks:
//! review necessity prediction, review comment generation, and code
//! refinement.
//!
//! The crate provides the full stack: dense numerics and optimizer, a tiny
//! causal transformer with exact adapter gradients, LoRA adapter handling
//! and accounting, corpus partitioning with a synthetic task generator,
//! classification and generation metrics with an exact signed-rank test, the
//! federated round loop with a binary wire protocol over in-process or TCP
//! transports, and the five multi-task training schedules.

pub mod data;
pub mod error;
pub mod federation;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod multitask;
pub mod numerics;
pub mod pipeline;
pub mod reference;

pub use error::{Error, Result};
