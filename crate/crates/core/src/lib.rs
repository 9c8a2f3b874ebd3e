//! Multi-source sequence generation on a small reverse-mode autodiff core.
//!
//! The model encodes K source sequences jointly (coarse encoder), refines
//! each with cross-source attention (fine encoder) and decodes with one
//! cross-attention per source whose results are mean-pooled.

pub mod corpus;
pub mod decoding;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod kv;
pub mod model;
pub mod scalar;
pub mod special;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{AttentionSpec, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Default floating-point type; 64-bit with the `f64` feature.
#[cfg(not(feature = "f64"))]
pub type Real = f32;
#[cfg(feature = "f64")]
pub type Real = f64;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Params = model::Parameters<Real>;
