//! A small reverse-mode differentiation layer over `f64` tensors.
//!
//! Graphs are static and built once per model shape; parameters live outside
//! the graph in a [`ParamSet`] so that many graphs can share one pool.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod optim;
pub mod tensor;

pub use error::{Result, SubstrateError};
pub use graph::{Evaluation, Feed, Gradients, Graph, Mode, NodeId, OpContext, Operator, ParamSet};
pub use optim::{Moments, Optimizer, OptimizerKind};
pub use tensor::Tensor;
