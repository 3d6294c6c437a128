//! Dense tensors, reverse-mode differentiation, layers, losses and Adam.

pub mod adam;
pub mod checkpoint;
pub mod graph;
pub mod params;
pub mod tensor;

pub use adam::AdamState;
pub use checkpoint::Container;
pub use graph::{Gradients, Graph, LayerSpec, Mode, Var};
pub use params::{ParamId, ParamSet};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
