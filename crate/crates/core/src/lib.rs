//! Desk-scale hierarchical contrastive pretraining for short videos.
//!
//! Everything is built from scratch in f64 on flat row-major buffers: a
//! Wengert-tape reverse-mode autodiff core, a tiny FPN-style convolutional
//! encoder with per-level projection heads, multi-level InfoNCE losses with a
//! softened classification objective, a synthetic video generator, and the
//! training / evaluation drivers that tie them together. No ML framework
//! dependencies; determinism is end to end given a seed.

pub mod autodiff;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod rng;
pub mod trainer;
pub mod wire;

pub use error::{Error, Result};
