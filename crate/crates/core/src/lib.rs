//! Decoupled teacher-student distillation for streaming binary prediction.
//!
//! A high-capacity teacher trains on the full event stream and emits raw
//! logits during its forward pass into an append-only [`signal_store`].
//! Students with a decoupled main/auxiliary tower consume a joined
//! supplementary stream, distill through a sampling-aware debias correction,
//! and are evaluated against a same-stream baseline to measure how much of
//! the teacher's advantage transfers.

pub mod datagen;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod pipeline;
pub mod signal_store;
pub mod validation;

pub use error::{Error, Result};
