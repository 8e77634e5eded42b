//! Reverse-mode automatic differentiation on a tape of small dense tensors.
//!
//! Every backward rule is itself recorded as tape operations, which is what
//! allows differentiating through a gradient step (second-order paths).

mod graph;
mod loss;
mod tensor;

pub use graph::{Graph, Var, PROB_FLOOR};
pub use loss::{cross_entropy, cross_entropy_labels, one_hot};
pub use tensor::Tensor;
