//! Residual sense induction on a frozen decoder language model.
//!
//! A small GPT-style decoder is pretrained and frozen; a gated residual
//! pathway adds a causal mixture of per-token sense vectors to its final
//! hidden state. The same sense variables drive word-sense measurement,
//! analytic lexical steering and contrastive adaptation. A Backpack-style
//! convex-mixture head and an SVD spectrum diagnostic serve as the baseline.
//!
//! All model code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the storage type for training (`f32`) and gradient checks (`f64`).

pub mod acros;
pub mod alignment;
pub mod backpack;
pub mod base_lm;
pub mod checkpoint;
pub mod diagnostics;
pub mod error;
pub mod numerics;
pub mod steering;
pub mod synth;
pub mod tokenizer;
pub mod train;
pub mod wsd;

pub use error::{Error, Result};
pub use numerics::{RngState, Scalar, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
