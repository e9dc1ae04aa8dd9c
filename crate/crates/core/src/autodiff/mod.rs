//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use graph::{Gradients, Graph, Primitive, Var};
pub use tensor::Tensor;

pub(crate) use kernels::sigmoid;
