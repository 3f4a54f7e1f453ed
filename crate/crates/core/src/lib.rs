//! Mixture-of-LoRA-experts adaptation of a frozen transformer encoder for
//! two-class (bonafide vs. spoof) sequence classification, built from
//! scratch on a minimal reverse-mode autodiff tensor library.
//!
//! The crate covers the full experiment loop: synthetic corpus generation,
//! adapter-injected encoder construction, training with AdamW and a cyclic
//! learning rate, EER evaluation, trainable-parameter accounting, expert
//! singular-value analysis, and multi-seed aggregation.

pub mod error;
pub mod rng;
pub mod analysis;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod gating;
pub mod head;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{grad_check, no_grad, Tensor};
