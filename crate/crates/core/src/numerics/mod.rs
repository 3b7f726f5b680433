//! Dense tensors, reverse-mode gradients and the layer primitives the model
//! is built from.

pub mod aggregate;
pub mod gradcheck;
pub mod graph;
mod real;
pub mod rng;
mod tensor;

pub use aggregate::Aggregation;
pub use gradcheck::{finite_diff_check, GradCheckConfig, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId};
pub use real::{DType, Real};
pub use tensor::Tensor;

/// Default layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;
