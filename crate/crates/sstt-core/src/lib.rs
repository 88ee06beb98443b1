//! Spatial-temporal stack-transformer for skeleton-sequence sign
//! classification: a small tape-based autodiff kernel, dataset plumbing with
//! signer-independent splits, joint-level augmentation, the model itself,
//! and training/evaluation loops. Everything is deterministic given a seed.

pub mod augment;
pub mod error;
pub mod eval;
pub mod manifest;
pub mod model;
pub mod rng;
pub mod skeleton;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::Error;
