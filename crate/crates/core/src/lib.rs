//! Embedding-space multiple instance learning (EMIL).
//!
//! An encoder maps an image to a feature map, patches of that map are average
//! pooled and classified independently, and a sigmoid-gated attention head
//! weights them into an image prediction whose denominator is clamped at
//! `k_min`. The crate also carries the loss stack for mask-guided training,
//! a synthetic dataset generator and the training/evaluation harness.

pub mod encoder;
pub mod error;
pub mod guidance;
pub mod harness;
pub mod head;
pub mod model;
pub mod pgm;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{Emil, ModelConfig};
pub use tensor::{Graph, Tensor, Var};
