//! Task-incremental continual learning for tabular sensor-feature classifiers.
//!
//! Modules, bottom up:
//!
//! - [`nn`]: row-major matrices, the MLP with an expandable head, SGD.
//! - [`losses`]: cross-entropy, distillation, EWC/RWC/MAS penalties and the
//!   LUCIR and ILOS terms, each with analytic gradients.
//! - [`engine`]: task sequences, replay memory and per-task training.
//! - [`data`]: CSV ingestion, splits, synthetic data and class statistics.
//! - [`metrics`]: micro/macro F1, subset scores and the forgetting measure.

pub mod data;
pub mod engine;
mod error;
pub mod losses;
pub mod metrics;
pub mod nn;

pub use error::{Error, Result};
