//! Dense tensors, reverse-mode autodiff, feed-forward layers and Adam.

pub mod adam;
pub mod graph;
pub mod linalg;
pub mod mlp;
pub mod tensor;

pub use adam::AdamState;
pub use graph::{Gradients, Graph, Var};
pub use mlp::{Activation, Dense, DenseVars, Mlp, MlpTrace};
pub use tensor::Tensor;
