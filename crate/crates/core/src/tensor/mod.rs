//! Minimal tensor engine: dense arrays, a reverse-mode autodiff tape with the
//! operators the counting network needs, and Adam.

mod adam;
mod array;
mod graph;
mod kernels;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use array::Tensor;
pub use graph::{Gradients, Graph, Var};
