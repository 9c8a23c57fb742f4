//! Reverse-mode automatic differentiation on dense `f64` tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! enough cached state to run the backward pass. Parameters live outside the
//! tape in a [`ParamStore`] and are bound into a fresh graph for every step.
//!
//! The op set is deliberately narrow. It covers what small convolutional
//! encoders, attention pooling heads and the usual classification losses need,
//! and nothing else.

mod gemm;
mod graph;
pub mod init;
pub mod optim;
mod params;
mod tensor;

pub use graph::{Conv2dSpec, Gradients, Graph, Var};
pub use params::{BoundParams, ParamStore};
pub use tensor::{ShapeError, Tensor};
