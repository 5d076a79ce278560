//! Compression-based normalization (IBNorm) and the pieces needed to study
//! it: a small reverse-mode autodiff engine, the classic normalization
//! family, matrix-based Rényi mutual-information estimation, and density and
//! moment analysis of normalized activations.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar for the common cases.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod autodiff;
pub mod compression;
mod error;
pub mod info;
pub mod norm;
mod scalar;

pub use error::{Error, Result};
pub use scalar::{gemm, Scalar};

pub use compression::{CompressionKind, CompressionParams};
pub use norm::{build_norm, NormKind, NormOrder, NormSpec};

pub type Tensor = autodiff::Tensor<f64>;
pub type Graph = autodiff::Graph<f64>;
pub type NormLayer = norm::NormLayer<f64>;
pub type GramMatrix = info::GramMatrix<f64>;

pub type TensorF32 = autodiff::Tensor<f32>;
pub type GraphF32 = autodiff::Graph<f32>;
pub type NormLayerF32 = norm::NormLayer<f32>;
pub type GramMatrixF32 = info::GramMatrix<f32>;
