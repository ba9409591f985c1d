//! Differentially private training of residual networks with scale
//! normalisation, together with Rényi-DP accounting and matrix-free Hessian
//! probes.
//!
//! Numeric code is generic over [`Scalar`]; training uses `f32` and the
//! `f64` aliases exist for verification.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod checkpoint;
pub mod container;
pub mod data;
pub mod dp;
mod error;
pub mod gradcheck;
pub mod instrumentation;
pub mod landscape;
pub mod nn;
mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Graph, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
