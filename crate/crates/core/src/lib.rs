// SPDX-License-Identifier: MIT OR Apache-2.0

//! Instrumented GPT-2 inference for attention-head interpretability.
//!
//! The crate provides a from-scratch CPU forward pass with hook points,
//! vocabulary projections of attention-head outputs, memory injection into
//! attention-layer outputs, the (layer, magnitude) sweep harness with its
//! metrics, FLOP accounting for memory encodings, and trainable per-head
//! lenses.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the common instantiations.

pub mod archive;
pub mod datasets;
pub mod error;
pub mod experiments;
pub mod interventions;
pub mod lens;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use model::{
    load_model, next_token_distribution, ActivationCache, ForwardOutput, HookPoint, Intervention, LogitRows, Model,
    ModelConfig, ModelWeights, ProcessingMode, RowSelect,
};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use tokenizer::{TokenId, Vocabulary};

/// Single-precision tensor, the storage type of every checkpoint.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor.
pub type Tensor64 = Tensor<f64>;
/// Model running in single precision.
pub type Model32 = Model<f32>;
/// Model running in double precision.
pub type Model64 = Model<f64>;
