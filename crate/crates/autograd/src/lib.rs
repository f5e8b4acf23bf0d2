//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Graphs are recorded eagerly as operations run. [`grad`] walks a graph
//! backwards; with `create_graph` set, the backward pass is recorded too,
//! which is what gradient penalties on input gradients require.

mod graph;
mod kernels;
pub mod nn;
pub mod ops;
pub mod optim;
mod tensor;

pub use graph::grad;
pub use nn::{ParamSet, VarSet};
pub use optim::Adam;
pub use tensor::{enable_grad, no_grad, Array, GradModeGuard, Tensor};
