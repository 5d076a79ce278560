//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Broadcasting is never implicit: binary elementwise primitives require equal
//! shapes and [`Graph::broadcast`] must be called explicitly.

pub mod gradcheck;
pub(crate) mod graph;
mod tensor;

pub use gradcheck::{grad_check, grad_check_inputs, GradCheckReport};
pub use graph::{Gradients, Graph, Primitive, Var};
pub use tensor::Tensor;
