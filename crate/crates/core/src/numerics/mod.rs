//! Dense `f64` tensors and reverse-mode differentiation.

mod graph;
pub mod kernels;
mod tensor;

pub use graph::{log_softmax, Gradients, Graph, ParamId, Var};
pub use tensor::Tensor;
