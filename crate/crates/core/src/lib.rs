//! Style transformer with common knowledge optimization for image-text
//! retrieval, at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense f64 matrices with reverse-mode differentiation and a
//!   finite-difference gradient checker.
//! - [`model`]: the two encoder pipelines (input projection, lightweight
//!   transformer layers, style embedding extractor, common knowledge
//!   optimization, feature adjustment) plus checkpoints and parameter counts.
//! - [`losses`]: contrastive and hardest-negative matching losses.
//! - [`data`]: the `CKFT1` feature format, a synthetic corpus generator and a
//!   deterministic batcher.
//! - [`train`]: Adam, the warm-up/decay schedule and the training loop.
//! - [`eval`]: recall@K, ablations and region-word matching export.

pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{grad_check, GradReport, Gradients, Tensor};
