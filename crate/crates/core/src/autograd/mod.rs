//! Minimal reverse-mode automatic differentiation over `f64` NCHW tensors.

mod graph;
pub mod kernels;

pub use graph::{BatchStats, Gradients, Graph, Tensor, Var};
