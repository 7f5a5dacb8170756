//! Composable blocks: functions from host data to tensors.
//!
//! A block maps one input value to one output value. Primitive blocks turn
//! host data into tensors (`scalar`, `tensor_literal`), run host-side
//! preprocessing (`input_transform`), or invoke a batched operation
//! (`function`). Combinators wire blocks together: `>>` pipes, `record`
//! destructures maps, `one_of` dispatches on a key, `map`/`fold`/`reduce`/
//! `zip_with` handle sequences, `all_of` fans one input out, and
//! [`Composition`] wires an arbitrary acyclic graph. Recursive models tie
//! the knot with [`ForwardDecl`].
//!
//! Blocks only *describe* computation. Compiling a block (see
//! [`crate::compile::Compiler`]) type-checks it; tracing it against a
//! concrete input emits the invocation graph that the scheduler batches.

mod infer;
mod lower;
mod pretty;
mod trace;

pub(crate) use infer::infer;
pub(crate) use lower::{lower, AKind, Arena};
pub(crate) use trace::{Tracer, DEFAULT_DEPTH_LIMIT};

use std::cell::RefCell;
use std::rc::{Rc, Weak};

use crate::error::{Error, Result};
use crate::host::{CaseKey, HostFn, HostValue, KeyFn};
use crate::tensor::DType;
use crate::types::{BlockType, TensorType};
use crate::ops::OpHandle;

/// A typed, composable description of per-input computation.
pub struct Block {
    pub(crate) kind: BlockKind,
    pub(crate) declared_out: Option<BlockType>,
    pub(crate) ty: Rc<RefCell<Option<(BlockType, BlockType)>>>,
}

pub(crate) enum BlockKind {
    /// Host number to a rank-0 tensor constant.
    Scalar(DType),
    /// Host number list (or tensor) to a tensor constant of a fixed type.
    TensorLit(TensorType),
    /// Invocation of a batched operation.
    Function(OpHandle),
    /// Host-side preprocessing.
    InputTransform { name: String, f: HostFn },
    Pipe(Box<Block>, Box<Block>),
    /// Applies each field block to the named field of the input map
    /// (or to the indexed element of an input list).
    Record(Vec<(String, Block)>),
    /// Dispatches the whole input to the case selected by the key function.
    OneOf { key_name: String, key: KeyFn, cases: Vec<(CaseKey, Block)> },
    /// Null input becomes zero tensors; anything else runs the body.
    Optional(Box<Block>),
    /// Applies every child to the same input; outputs a tuple.
    AllOf(Vec<Block>),
    Map(Box<Block>),
    Fold { step: Box<Block>, init: Box<Block> },
    Reduce(Box<Block>),
    /// Adds up a sequence (or uniform tuple) of tensors pairwise.
    Sum,
    /// Zips a tuple of sequences elementwise through the child block.
    ZipWith(Box<Block>),
    /// Turns a value into an endless repetition of itself, for zipping
    /// against finite sequences.
    Broadcast,
    /// Produces zero tensors of a fixed type from no input.
    Zeros(BlockType),
    Composition(CompGraph),
    ForwardRef(Weak<ForwardInner>),
}

impl Block {
    fn new(kind: BlockKind) -> Block {
        Block { kind, declared_out: None, ty: Rc::new(RefCell::new(None)) }
    }

    /// Converts a host number into a rank-0 tensor constant.
    pub fn scalar(dtype: DType) -> Block {
        Block::new(BlockKind::Scalar(dtype))
    }

    /// Converts host data (nested number lists or a tensor) into a tensor
    /// constant of the given type.
    pub fn tensor_literal(t: TensorType) -> Block {
        Block::new(BlockKind::TensorLit(t))
    }

    /// Invokes a batched operation on tensor input(s). Tuple inputs may be
    /// nested; their flattening must match the operation's input slots.
    pub fn function(op: &OpHandle) -> Block {
        Block::new(BlockKind::Function(op.clone()))
    }

    /// Runs a host-side function before further blocks. The name appears
    /// in type errors and dumps.
    pub fn input_transform<F>(name: &str, f: F) -> Block
    where
        F: Fn(&HostValue) -> Result<HostValue> + Send + Sync + 'static,
    {
        Block::new(BlockKind::InputTransform {
            name: name.to_string(),
            f: std::sync::Arc::new(f),
        })
    }

    /// Applies each field block to the correspondingly named field of an
    /// input map. Numeric field names index into input lists. The output
    /// is a tuple in declared field order.
    pub fn record(fields: Vec<(&str, Block)>) -> Block {
        Block::new(BlockKind::Record(
            fields.into_iter().map(|(k, b)| (k.to_string(), b)).collect(),
        ))
    }

    /// Dispatches the input to the case whose key matches `key(input)`.
    /// All cases must produce the same output type.
    pub fn one_of<F>(key_name: &str, key: F, cases: Vec<(CaseKey, Block)>) -> Block
    where
        F: Fn(&HostValue) -> Result<CaseKey> + Send + Sync + 'static,
    {
        Block::new(BlockKind::OneOf {
            key_name: key_name.to_string(),
            key: std::sync::Arc::new(key),
            cases,
        })
    }

    /// Runs the body, except a null input becomes zero tensors of the
    /// body's output type.
    pub fn optional(body: Block) -> Block {
        Block::new(BlockKind::Optional(Box::new(body)))
    }

    /// Applies every child block to one shared input and tuples up the
    /// outputs. Children that consume nothing (like [`Block::zeros`]) are
    /// fed nothing.
    pub fn all_of(children: Vec<Block>) -> Block {
        Block::new(BlockKind::AllOf(children))
    }

    /// Applies the child to each element of a sequence (or host list).
    pub fn map(f: Block) -> Block {
        Block::new(BlockKind::Map(Box::new(f)))
    }

    /// Left fold: `init` produces the starting state from no input, and
    /// `step` maps `(state, element)` to the next state.
    pub fn fold(step: Block, init: Block) -> Block {
        Block::new(BlockKind::Fold { step: Box::new(step), init: Box::new(init) })
    }

    /// Combines a non-empty sequence pairwise with `g`, splitting the
    /// sequence in half at each level so the combine tree has logarithmic
    /// depth.
    pub fn reduce(g: Block) -> Block {
        Block::new(BlockKind::Reduce(Box::new(g)))
    }

    /// Adds up a sequence of tensors (empty means zeros) or a uniform
    /// tuple of tensors, pairwise with logarithmic depth.
    pub fn sum() -> Block {
        Block::new(BlockKind::Sum)
    }

    /// Zips a tuple of sequences elementwise through `f`, stopping at the
    /// shortest sequence.
    pub fn zip_with(f: Block) -> Block {
        Block::new(BlockKind::ZipWith(Box::new(f)))
    }

    /// Repeats a value endlessly so it can zip against finite sequences.
    /// Endless sequences cannot be materialized (summed, folded, mapped
    /// into a result); they exist only to be zipped.
    pub fn broadcast() -> Block {
        Block::new(BlockKind::Broadcast)
    }

    /// Produces zero tensors of the given (tensor-only) type from no input.
    pub fn zeros(t: BlockType) -> Block {
        Block::new(BlockKind::Zeros(t))
    }

    /// Declares the output type, seeding type inference where it cannot be
    /// derived from context.
    pub fn with_output_type(mut self, t: BlockType) -> Block {
        self.declared_out = Some(t);
        self
    }

    /// The inferred input type. Present after compilation.
    pub fn in_type(&self) -> Option<BlockType> {
        self.ty.borrow().as_ref().map(|(i, _)| i.clone())
    }

    /// The inferred output type. Present after compilation.
    pub fn out_type(&self) -> Option<BlockType> {
        self.ty.borrow().as_ref().map(|(_, o)| o.clone())
    }

    /// Renders the block tree with inferred types, one node per line.
    pub fn dump(&self) -> String {
        pretty::dump(self)
    }
}

impl std::fmt::Debug for Block {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Block({})", pretty::label(self))
    }
}

impl std::ops::Shr for Block {
    type Output = Block;

    fn shr(self, rhs: Block) -> Block {
        Block::new(BlockKind::Pipe(Box::new(self), Box::new(rhs)))
    }
}

// ---------------------------------------------------------------------------
// Forward declarations (recursion)
// ---------------------------------------------------------------------------

pub(crate) struct ForwardInner {
    pub(crate) name: String,
    pub(crate) resolved: RefCell<Option<Block>>,
}

/// A named placeholder for a block defined later, enabling recursive
/// blocks. References created before resolution stay valid; the
/// declaration itself must outlive every compiled use of its references.
pub struct ForwardDecl {
    inner: Rc<ForwardInner>,
}

impl ForwardDecl {
    pub fn new(name: &str) -> ForwardDecl {
        ForwardDecl {
            inner: Rc::new(ForwardInner {
                name: name.to_string(),
                resolved: RefCell::new(None),
            }),
        }
    }

    pub fn name(&self) -> &str {
        &self.inner.name
    }

    /// A block that stands for the eventual definition. May be used inside
    /// the definition itself.
    pub fn reference(&self) -> Block {
        Block::new(BlockKind::ForwardRef(Rc::downgrade(&self.inner)))
    }

    /// Installs the definition. Resolving twice is an error.
    pub fn resolve_to(&self, block: Block) -> Result<()> {
        let mut slot = self.inner.resolved.borrow_mut();
        if slot.is_some() {
            return Err(Error::InvalidBlock {
                location: format!("forward declaration {:?}", self.inner.name),
                message: "already resolved".to_string(),
            });
        }
        *slot = Some(block);
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Composition graphs
// ---------------------------------------------------------------------------

/// Where a composition wire reads from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Source {
    Input,
    Node(usize),
}

/// One read inside a composition: a source value, optionally projected to
/// one tuple field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Wire {
    pub(crate) src: Source,
    pub(crate) field: Option<usize>,
}

impl Wire {
    /// The composition's own input.
    pub fn input() -> Wire {
        Wire { src: Source::Input, field: None }
    }

    /// One tuple field of the composition's input.
    pub fn input_field(i: usize) -> Wire {
        Wire { src: Source::Input, field: Some(i) }
    }
}

/// Handle to a node added to a [`Composition`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRef(pub(crate) usize);

impl NodeRef {
    /// The node's whole output.
    pub fn wire(self) -> Wire {
        Wire { src: Source::Node(self.0), field: None }
    }

    /// One tuple field of the node's output.
    pub fn field(self, i: usize) -> Wire {
        Wire { src: Source::Node(self.0), field: Some(i) }
    }
}

pub(crate) struct CompNode {
    pub block: Block,
    pub reads: Vec<Wire>,
}

pub(crate) struct CompGraph {
    pub nodes: Vec<CompNode>,
    pub output: Vec<Wire>,
    /// Topological evaluation order, computed when the builder is sealed.
    pub order: Vec<usize>,
}

/// Builder for a block whose children form an arbitrary acyclic wiring.
///
/// Each node reads zero or more wires: none means the node's block consumes
/// nothing, one passes that value, several pass a tuple. The finished
/// composition outputs its `set_output` wires the same way.
pub struct Composition {
    nodes: Vec<CompNode>,
    output: Option<Vec<Wire>>,
}

impl Default for Composition {
    fn default() -> Self {
        Composition::new()
    }
}

impl Composition {
    pub fn new() -> Composition {
        Composition { nodes: Vec::new(), output: None }
    }

    /// Adds a node wired to the given reads.
    pub fn add(&mut self, block: Block, reads: &[Wire]) -> NodeRef {
        self.nodes.push(CompNode { block, reads: reads.to_vec() });
        NodeRef(self.nodes.len() - 1)
    }

    /// Adds a node with no reads yet; wire it later with [`Composition::wire`].
    pub fn add_unwired(&mut self, block: Block) -> NodeRef {
        self.add(block, &[])
    }

    /// Replaces a node's reads. Wiring that creates a cycle is reported
    /// when the composition is sealed.
    pub fn wire(&mut self, node: NodeRef, reads: &[Wire]) {
        self.nodes[node.0].reads = reads.to_vec();
    }

    /// Declares which wires form the composition's output.
    pub fn set_output(&mut self, reads: &[Wire]) {
        self.output = Some(reads.to_vec());
    }

    /// Seals the builder into a block, checking the wiring is complete
    /// and acyclic.
    pub fn into_block(self) -> Result<Block> {
        let output = self.output.ok_or_else(|| Error::InvalidBlock {
            location: "composition".to_string(),
            message: "output is not wired; call set_output".to_string(),
        })?;
        let check = |what: String, reads: &[Wire]| -> Result<()> {
            for w in reads {
                if let Source::Node(j) = w.src {
                    if j >= self.nodes.len() {
                        return Err(Error::InvalidBlock {
                            location: what.clone(),
                            message: format!("read from nonexistent node {j}"),
                        });
                    }
                }
            }
            Ok(())
        };
        for (i, node) in self.nodes.iter().enumerate() {
            check(format!("composition node {i}"), &node.reads)?;
        }
        check("composition output".to_string(), &output)?;
        let order = toposort(&self.nodes)?;
        Ok(Block::new(BlockKind::Composition(CompGraph { nodes: self.nodes, output, order })))
    }
}

/// Kahn's algorithm over node reads; reports the nodes stuck on a cycle.
fn toposort(nodes: &[CompNode]) -> Result<Vec<usize>> {
    let n = nodes.len();
    let mut indegree = vec![0usize; n];
    let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, node) in nodes.iter().enumerate() {
        for w in &node.reads {
            if let Source::Node(j) = w.src {
                indegree[i] += 1;
                consumers[j].push(i);
            }
        }
    }
    let mut ready: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    let mut next = 0;
    while next < ready.len() {
        let i = ready[next];
        next += 1;
        order.push(i);
        for &c in &consumers[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.push(c);
            }
        }
    }
    if order.len() < n {
        let stuck: Vec<usize> = (0..n).filter(|&i| indegree[i] > 0).collect();
        return Err(Error::CompositionCycle(stuck));
    }
    Ok(order)
}
