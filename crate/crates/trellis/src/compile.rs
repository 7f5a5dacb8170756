//! Compiling a block into a reusable model: type checking plus operation
//! enumeration.
//!
//! Compilation happens once per model. It type-checks the block tree and
//! registers every operation the model can invoke, in first-use order.
//! The compiler is then traced against concrete inputs, once per batch,
//! producing the invocation graphs the scheduler batches.

use std::collections::HashMap;
use std::sync::Arc;

use crate::blocks::{infer, lower, AKind, Arena, Block, Tracer};
use crate::error::{Error, Result};
use crate::graph::InvocationGraph;
use crate::host::HostValue;
use crate::ops::{sum_add_op, OpHandle};
use crate::types::BlockType;

/// A type-checked block with its operations enumerated.
pub struct Compiler {
    root: Block,
    ops: Vec<OpHandle>,
    /// Operation identity (`Arc` pointer) to index in `ops`.
    op_index: HashMap<usize, usize>,
    /// Pairwise-add operation name to index in `ops`, one per element
    /// type summed anywhere in the block.
    sum_index: HashMap<String, usize>,
    warnings: Vec<String>,
    trace_depth_limit: usize,
}

impl Compiler {
    /// Type-checks the block and enumerates its operations.
    pub fn new(root: Block) -> Result<Compiler> {
        let mut arena = lower(&root)?;
        infer(&mut arena)?;
        let mut c = Compiler {
            root,
            ops: Vec::new(),
            op_index: HashMap::new(),
            sum_index: HashMap::new(),
            warnings: std::mem::take(&mut arena.warnings),
            trace_depth_limit: crate::blocks::DEFAULT_DEPTH_LIMIT,
        };
        c.collect_ops(&arena)?;
        Ok(c)
    }

    /// Caps how deep forward-declaration references may recurse during a
    /// trace before reporting an error (default 10000).
    pub fn set_trace_depth_limit(&mut self, limit: usize) {
        self.trace_depth_limit = limit;
    }

    /// Registers every operation in the arena, in first-use order. Sums
    /// register a pairwise-add operation per element type.
    fn collect_ops(&mut self, arena: &Arena) -> Result<()> {
        for node in &arena.nodes {
            match &node.kind {
                AKind::Function(op) => {
                    let key = Arc::as_ptr(op) as usize;
                    if self.op_index.contains_key(&key) {
                        continue;
                    }
                    if self.ops.iter().any(|o| o.name == op.name) {
                        return Err(Error::Config(format!(
                            "two different operations share the name {:?}; \
                             reuse one handle instead",
                            op.name
                        )));
                    }
                    self.ops.push(op.clone());
                    self.op_index.insert(key, self.ops.len() - 1);
                }
                AKind::Sum => {
                    let Some(BlockType::Tensor(tt)) = arena.cells.get(node.out_cell).cloned()
                    else {
                        return Err(Error::Underdetermined { location: node.path.clone() });
                    };
                    let add = sum_add_op(&tt);
                    if self.sum_index.contains_key(&add.name) {
                        continue;
                    }
                    if self.ops.iter().any(|o| o.name == add.name) {
                        return Err(Error::Config(format!(
                            "operation name {:?} is reserved for sums over {tt}",
                            add.name
                        )));
                    }
                    self.ops.push(add.clone());
                    self.sum_index.insert(add.name.clone(), self.ops.len() - 1);
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// The compiled block, with inferred types filled in.
    pub fn root(&self) -> &Block {
        &self.root
    }

    /// Every operation the model can invoke, in first-use order.
    pub fn ops(&self) -> &[OpHandle] {
        &self.ops
    }

    /// Non-fatal observations from type checking.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Traces the model against one input.
    pub fn trace(&self, input: &HostValue) -> Result<InvocationGraph> {
        self.trace_batch(std::slice::from_ref(input))
    }

    /// Traces the model against each input of a batch, accumulating one
    /// invocation graph that the scheduler batches across inputs.
    pub fn trace_batch(&self, inputs: &[HostValue]) -> Result<InvocationGraph> {
        let mut tracer = Tracer::new(&self.op_index, &self.sum_index, self.trace_depth_limit);
        for input in inputs {
            tracer.add_root(&self.root, input)?;
        }
        Ok(tracer.finish(self.ops.clone()))
    }
}
