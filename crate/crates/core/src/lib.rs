//! Bilateral contrastive knowledge distillation (BicKD) at desk scale.
//!
//! The crate bundles everything needed to train small teacher/student
//! classifier pairs and study the probability-space geometry the bilateral
//! contrastive objective induces:
//!
//! * [`tensor`] — a dense `f64` tensor type with reverse-mode automatic
//!   differentiation, sized for batches of logits and small MLPs.
//! * [`losses`] — cross-entropy, temperature KL, the sample-wise and
//!   class-wise orthogonality/alignment terms, and their weighted
//!   combinations.
//! * [`models`] — seeded multilayer perceptrons with checkpointing.
//! * [`data`] — Gaussian-blob generation, IDX ingestion, few-shot and
//!   long-tailed resampling, seeded batch iteration.
//! * [`trainer`] — the distillation loop: Nesterov-momentum SGD, stepwise
//!   learning-rate decay, per-epoch reporting.
//! * [`geometry`] — class-mean orthogonality statistics and accuracy
//!   metrics.
//! * [`gradcheck`] — central finite-difference verification of every loss
//!   gradient.

pub mod data;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod models;
pub mod report;
pub mod tensor;
pub mod trainer;

pub use tensor::{Tensor, TensorError};
