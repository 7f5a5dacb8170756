//! Dynamic batching for dynamic computation graphs.
//!
//! Models over trees, sequences, and graphs build a different computation
//! graph for every input, which defeats ordinary fixed-shape batching.
//! This crate batches them anyway: blocks describe the per-input
//! computation, the scheduler rewrites a batch of traced graphs into a
//! single depth-ordered plan that groups identical operations, and the
//! runtime executes that plan on dense tensor kernels, forward and
//! backward.

pub mod blocks;
pub mod compile;
pub mod data;
pub mod error;
pub mod graph;
pub mod host;
pub mod kernels;
pub mod models;
pub mod ops;
pub mod reference;
pub mod runtime;
pub mod schedule;
pub mod tensor;
pub mod types;

#[cfg(test)]
pub(crate) mod testutil;

pub use blocks::{Block, Composition, ForwardDecl, NodeRef, Wire};
pub use compile::Compiler;
pub use error::{Error, Result};
pub use host::{CaseKey, HostValue};
pub use ops::{OpHandle, Operation};
pub use tensor::{DType, Tensor};
pub use types::{BlockType, TensorType};
