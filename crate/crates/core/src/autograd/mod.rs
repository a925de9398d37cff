//! Minimal tensor autograd used by the networks.

mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
