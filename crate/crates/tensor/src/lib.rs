//! Minimal dense tensor library with a dynamic reverse-mode autodiff graph.
//!
//! Every operation returns a new [`Tensor`]. When gradient tracking is enabled
//! and at least one input requires gradients, the result records a backward
//! rule; calling [`Tensor::backward`] on a scalar walks the graph once in
//! reverse topological order and accumulates into each reachable tensor that
//! requires gradients.
//!
//! Broadcasting aligns shapes on their trailing dimensions. Each aligned pair
//! of extents must be equal or one of them must be `1`; missing leading
//! dimensions are treated as `1`.

mod error;
pub mod gradcheck;
pub mod io;
mod ops;
mod rng;
mod shape;
mod tensor;

pub use error::{Result, TensorError};
pub use ops::elementwise::{elementwise, BinaryOp, ElementwiseOp, UnaryOp};
pub use ops::norm::DEFAULT_LN_EPS;
pub use rng::RngStream;
pub use shape::broadcast_shape;
pub use tensor::{allocated_floats, is_grad_enabled, no_grad, reset_allocated_floats, Tensor};
