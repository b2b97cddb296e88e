//! Minimal dense tensor engine with tape-based reverse-mode differentiation.
//!
//! Values are row-major `f64` [`Tensor`]s. A [`Graph`] records one forward pass;
//! learnable state lives in a [`ParamStore`] and enters a graph through
//! [`Graph::param`]. [`check_gradient`] compares tape gradients against central
//! differences.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod param;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{check_gradient, check_gradient_for};
pub use graph::{sigmoid, Gradients, Graph, Var};
pub use param::{named_rng, Init, ParamId, ParamStore, Parameter};
pub use tensor::{broadcast_shapes, topk_row_mask, Tensor};
