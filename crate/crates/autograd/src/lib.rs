//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Values are `f64` throughout. A [`Graph`] records one forward computation;
//! [`Graph::backward`] walks it in reverse append order and returns the
//! gradients of every differentiable leaf. Learnable tensors live in a
//! [`ParamStore`] and are updated by [`AdamState`].
//!
//! All kernels are single-threaded and use a fixed reduction order, so a
//! forward pass is bit-reproducible for identical inputs and parameters.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod error;
mod gemm;
mod graph;
mod ops;
mod param;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use error::{AutogradError, Result};
pub use graph::{Gradients, Graph, ParamId, Var};
pub use param::{Param, ParamStore};
pub use tensor::Tensor;
