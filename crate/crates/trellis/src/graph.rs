//! Invocation graphs: the dynamic computation DAG traced from a batch of
//! inputs.
//!
//! Nodes are tensor constants, operation invocations, or pass-through
//! copies the scheduler inserts so that every edge spans exactly one depth.
//! Constants sit at depth 0; an invocation sits one past its deepest
//! dependency. Results are per-input lists of value references plus a
//! shape tree recording how each input's (possibly nested) outputs were
//! arranged.

use crate::error::{Error, Result};
use crate::ops::OpHandle;
use crate::tensor::Tensor;
use crate::types::TensorType;

/// One output slot of one graph node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueRef {
    pub node: usize,
    pub slot: usize,
}

#[derive(Debug)]
pub enum GraphNode {
    /// An unbatched (item-shaped) tensor constant.
    Constant { value: Tensor, ttype: TensorType },
    /// One application of `ops[op]` to already-computed values.
    Invocation { op: usize, inputs: Vec<ValueRef> },
    /// Identity copy that moves a value down one depth.
    PassThrough { input: ValueRef, ttype: TensorType },
}

/// Structure of one traced input's results: which result slots the leaves
/// landed in and how they nest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResultTree {
    Leaf(usize),
    Tuple(Vec<ResultTree>),
    Seq(Vec<ResultTree>),
    Void,
}

/// The traced computation of a whole batch.
#[derive(Debug)]
pub struct InvocationGraph {
    pub ops: Vec<OpHandle>,
    pub nodes: Vec<GraphNode>,
    /// Per traced input, the flat list of result values.
    pub results: Vec<Vec<ValueRef>>,
    /// Per traced input, how the flat results nest.
    pub result_trees: Vec<ResultTree>,
}

impl InvocationGraph {
    pub fn value_type(&self, r: ValueRef) -> TensorType {
        match &self.nodes[r.node] {
            GraphNode::Constant { ttype, .. } => ttype.clone(),
            GraphNode::Invocation { op, .. } => self.ops[*op].outputs[r.slot].clone(),
            GraphNode::PassThrough { ttype, .. } => ttype.clone(),
        }
    }

    /// Number of operation invocations (constants and pass-throughs are
    /// not counted).
    pub fn invocation_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, GraphNode::Invocation { .. }))
            .count()
    }

    /// Depth of every node: constants at 0, invocations one past their
    /// deepest dependency, pass-throughs one past their input. Nodes are
    /// created in dependency order, so one forward sweep settles it.
    pub fn assign_depths(&self) -> Vec<usize> {
        let mut depth = vec![0usize; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            depth[i] = match node {
                GraphNode::Constant { .. } => 0,
                GraphNode::Invocation { inputs, .. } => {
                    1 + inputs.iter().map(|r| depth[r.node]).max().unwrap_or(0)
                }
                GraphNode::PassThrough { input, .. } => depth[input.node] + 1,
            };
        }
        depth
    }

    /// Inserts pass-through nodes so every invocation input comes from the
    /// immediately preceding depth, sharing chains between consumers that
    /// need the same value at the same depth. Returns the updated depths.
    pub fn insert_pass_throughs(&mut self) -> Vec<usize> {
        let mut depth = self.assign_depths();
        // Memoized hops: (source value, depth it is needed at) to the
        // pass-through value sitting at that depth.
        let mut hops: std::collections::HashMap<(ValueRef, usize), ValueRef> =
            std::collections::HashMap::new();
        for i in 0..self.nodes.len() {
            let (inputs, my_depth) = match &self.nodes[i] {
                GraphNode::Invocation { inputs, .. } => (inputs.clone(), depth[i]),
                _ => continue,
            };
            let mut changed = false;
            let mut new_inputs = Vec::with_capacity(inputs.len());
            for r in inputs {
                let mut cur = r;
                while depth[cur.node] + 1 < my_depth {
                    let want = depth[cur.node] + 1;
                    cur = *hops.entry((cur, want)).or_insert_with(|| {
                        let ttype = match &self.nodes[cur.node] {
                            GraphNode::Constant { ttype, .. } => ttype.clone(),
                            GraphNode::Invocation { op, .. } => {
                                self.ops[*op].outputs[cur.slot].clone()
                            }
                            GraphNode::PassThrough { ttype, .. } => ttype.clone(),
                        };
                        self.nodes.push(GraphNode::PassThrough { input: cur, ttype });
                        depth.push(want);
                        ValueRef { node: self.nodes.len() - 1, slot: 0 }
                    });
                    changed = true;
                }
                new_inputs.push(cur);
            }
            if changed {
                if let GraphNode::Invocation { inputs, .. } = &mut self.nodes[i] {
                    *inputs = new_inputs;
                }
            }
        }
        depth
    }

    /// Checks every result reference points at a real node output.
    pub fn validate(&self) -> Result<()> {
        for refs in &self.results {
            for r in refs {
                if r.node >= self.nodes.len() {
                    return Err(Error::Schedule(format!(
                        "result references nonexistent node {}",
                        r.node
                    )));
                }
            }
        }
        Ok(())
    }
}
