//! Lowering: flattening a block tree into an arena for type inference.
//!
//! Each block occurrence becomes one arena node with an input and output
//! type cell. Cells form a union-find so cells known to be equal (forward
//! references and their definition) share storage. Forward-declaration
//! bodies are lowered exactly once, at their first reference.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::host::CaseKey;
use crate::ops::OpHandle;
use crate::types::{BlockType, TensorType};

use super::{Block, BlockKind, ForwardInner, Wire};

/// Union-find over type cells, each holding an optional concrete type.
pub(crate) struct Cells {
    parent: Vec<usize>,
    value: Vec<Option<BlockType>>,
}

impl Cells {
    fn new() -> Cells {
        Cells { parent: Vec::new(), value: Vec::new() }
    }

    pub fn fresh(&mut self) -> usize {
        self.parent.push(self.parent.len());
        self.value.push(None);
        self.parent.len() - 1
    }

    fn find(&self, mut c: usize) -> usize {
        while self.parent[c] != c {
            c = self.parent[c];
        }
        c
    }

    pub fn get(&self, c: usize) -> Option<&BlockType> {
        self.value[self.find(c)].as_ref()
    }

    /// Sets a cell's type; returns whether anything changed. A conflicting
    /// existing type is a mismatch at `location`.
    pub fn set(&mut self, c: usize, t: BlockType, location: &str) -> Result<bool> {
        let r = self.find(c);
        match &self.value[r] {
            None => {
                self.value[r] = Some(t);
                Ok(true)
            }
            Some(u) if *u == t => Ok(false),
            Some(u) => Err(Error::TypeMismatch {
                location: location.to_string(),
                expected: u.to_string(),
                found: t.to_string(),
            }),
        }
    }

    /// Merges two cells into one, keeping whichever type is known.
    pub fn union(&mut self, a: usize, b: usize, location: &str) -> Result<()> {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return Ok(());
        }
        match (&self.value[ra], &self.value[rb]) {
            (Some(x), Some(y)) if x != y => {
                return Err(Error::TypeMismatch {
                    location: location.to_string(),
                    expected: x.to_string(),
                    found: y.to_string(),
                })
            }
            _ => {}
        }
        if self.value[ra].is_none() {
            self.value[ra] = self.value[rb].take();
        }
        self.parent[rb] = ra;
        Ok(())
    }
}

/// Arena node kinds; children are arena indices.
pub(crate) enum AKind {
    Scalar,
    TensorLit,
    Function(OpHandle),
    InputTransform,
    Pipe(usize, usize),
    Record(Vec<usize>),
    OneOf(Vec<(CaseKey, usize)>),
    Optional(usize),
    AllOf(Vec<usize>),
    Map(usize),
    Fold { step: usize, init: usize },
    Reduce(usize),
    Sum,
    ZipWith(usize),
    Broadcast,
    Zeros,
    Composition { nodes: Vec<(usize, Vec<Wire>)>, output: Vec<Wire> },
    ForwardRef,
}

pub(crate) struct ANode {
    pub path: String,
    pub kind: AKind,
    pub in_cell: usize,
    pub out_cell: usize,
    /// Write-back target: the block's own type annotation.
    pub ty_cell: Rc<std::cell::RefCell<Option<(BlockType, BlockType)>>>,
}

pub(crate) struct Arena {
    pub nodes: Vec<ANode>,
    pub cells: Cells,
    pub warnings: Vec<String>,
}

struct DeclEntry {
    in_cell: usize,
    out_cell: usize,
}

struct Lowerer {
    arena: Arena,
    decls: HashMap<*const ForwardInner, DeclEntry>,
}

/// Flattens the block tree (and any forward-declaration bodies it
/// references) into an arena, seeding type cells that are structurally
/// fixed.
pub(crate) fn lower(root: &Block) -> Result<Arena> {
    let mut l = Lowerer {
        arena: Arena { nodes: Vec::new(), cells: Cells::new(), warnings: Vec::new() },
        decls: HashMap::new(),
    };
    l.lower_block(root, "root".to_string())?;
    Ok(l.arena)
}

impl Lowerer {
    fn lower_block(&mut self, b: &Block, path: String) -> Result<usize> {
        let in_cell = self.arena.cells.fresh();
        let out_cell = self.arena.cells.fresh();
        let id = self.arena.nodes.len();
        self.arena.nodes.push(ANode {
            path: path.clone(),
            kind: AKind::Sum,
            in_cell,
            out_cell,
            ty_cell: b.ty.clone(),
        });
        if let Some(t) = &b.declared_out {
            self.arena.cells.set(out_cell, t.clone(), &path)?;
        }
        let kind = match &b.kind {
            BlockKind::Scalar(dt) => {
                self.seed(in_cell, BlockType::Input, &path)?;
                self.seed(out_cell, BlockType::Tensor(TensorType::new(*dt, &[])), &path)?;
                AKind::Scalar
            }
            BlockKind::TensorLit(t) => {
                self.seed(in_cell, BlockType::Input, &path)?;
                self.seed(out_cell, BlockType::Tensor(t.clone()), &path)?;
                AKind::TensorLit
            }
            BlockKind::Function(op) => {
                let out = if op.outputs.len() == 1 {
                    BlockType::Tensor(op.outputs[0].clone())
                } else {
                    BlockType::Tuple(
                        op.outputs.iter().map(|t| BlockType::Tensor(t.clone())).collect(),
                    )
                };
                self.seed(out_cell, out, &path)?;
                AKind::Function(op.clone())
            }
            BlockKind::InputTransform { .. } => {
                self.seed(in_cell, BlockType::Input, &path)?;
                self.seed(out_cell, BlockType::Input, &path)?;
                AKind::InputTransform
            }
            BlockKind::Pipe(a, bb) => {
                let ca = self.lower_block(a, format!("{path}/pipe[0]"))?;
                let cb = self.lower_block(bb, format!("{path}/pipe[1]"))?;
                AKind::Pipe(ca, cb)
            }
            BlockKind::Record(fields) => {
                self.seed(in_cell, BlockType::Input, &path)?;
                let mut children = Vec::with_capacity(fields.len());
                for (name, child) in fields {
                    let c = self.lower_block(child, format!("{path}/record[{name}]"))?;
                    let c_in = self.arena.nodes[c].in_cell;
                    self.seed(c_in, BlockType::Input, &self.arena.nodes[c].path.clone())?;
                    children.push(c);
                }
                AKind::Record(children)
            }
            BlockKind::OneOf { cases, .. } => {
                self.seed(in_cell, BlockType::Input, &path)?;
                let mut lowered = Vec::with_capacity(cases.len());
                for (key, child) in cases {
                    let c = self.lower_block(child, format!("{path}/case[{key}]"))?;
                    let c_in = self.arena.nodes[c].in_cell;
                    self.seed(c_in, BlockType::Input, &self.arena.nodes[c].path.clone())?;
                    lowered.push((key.clone(), c));
                }
                if lowered.is_empty() {
                    return Err(Error::InvalidBlock {
                        location: path,
                        message: "one_of needs at least one case".to_string(),
                    });
                }
                AKind::OneOf(lowered)
            }
            BlockKind::Optional(child) => {
                self.seed(in_cell, BlockType::Input, &path)?;
                let c = self.lower_block(child, format!("{path}/optional"))?;
                let c_in = self.arena.nodes[c].in_cell;
                self.seed(c_in, BlockType::Input, &self.arena.nodes[c].path.clone())?;
                AKind::Optional(c)
            }
            BlockKind::AllOf(children) => {
                let mut lowered = Vec::with_capacity(children.len());
                for (i, child) in children.iter().enumerate() {
                    lowered.push(self.lower_block(child, format!("{path}/all_of[{i}]"))?);
                }
                AKind::AllOf(lowered)
            }
            BlockKind::Map(f) => AKind::Map(self.lower_block(f, format!("{path}/map"))?),
            BlockKind::Fold { step, init } => AKind::Fold {
                step: self.lower_block(step, format!("{path}/fold.step"))?,
                init: self.lower_block(init, format!("{path}/fold.init"))?,
            },
            BlockKind::Reduce(g) => {
                AKind::Reduce(self.lower_block(g, format!("{path}/reduce"))?)
            }
            BlockKind::Sum => AKind::Sum,
            BlockKind::ZipWith(f) => {
                AKind::ZipWith(self.lower_block(f, format!("{path}/zip_with"))?)
            }
            BlockKind::Broadcast => AKind::Broadcast,
            BlockKind::Zeros(t) => {
                if !t.is_tensor_only() {
                    return Err(Error::InvalidBlock {
                        location: path,
                        message: format!("zeros needs a tensor-only type, got {t}"),
                    });
                }
                self.seed(in_cell, BlockType::Void, &path)?;
                self.seed(out_cell, t.clone(), &path)?;
                AKind::Zeros
            }
            BlockKind::Composition(graph) => {
                let mut lowered = Vec::with_capacity(graph.nodes.len());
                for (i, node) in graph.nodes.iter().enumerate() {
                    let c = self.lower_block(&node.block, format!("{path}/node[{i}]"))?;
                    lowered.push((c, node.reads.clone()));
                }
                AKind::Composition { nodes: lowered, output: graph.output.clone() }
            }
            BlockKind::ForwardRef(weak) => {
                let inner = weak.upgrade().ok_or_else(|| Error::InvalidBlock {
                    location: path.clone(),
                    message: "forward declaration was dropped before compilation".to_string(),
                })?;
                let ptr = Rc::as_ptr(&inner);
                // The registry entry must exist before the body is lowered
                // so that references inside the body alias it instead of
                // recursing forever.
                let first_reference = !self.decls.contains_key(&ptr);
                if first_reference {
                    let d_in = self.arena.cells.fresh();
                    let d_out = self.arena.cells.fresh();
                    self.decls.insert(ptr, DeclEntry { in_cell: d_in, out_cell: d_out });
                }
                let (d_in, d_out) = {
                    let e = &self.decls[&ptr];
                    (e.in_cell, e.out_cell)
                };
                self.arena.cells.union(in_cell, d_in, &path)?;
                self.arena.cells.union(out_cell, d_out, &path)?;
                if first_reference {
                    let borrow = inner.resolved.borrow();
                    let def = borrow.as_ref().ok_or_else(|| Error::InvalidBlock {
                        location: path.clone(),
                        message: format!(
                            "forward declaration {:?} is not resolved",
                            inner.name
                        ),
                    })?;
                    let def_id = self.lower_block(def, format!("def({})", inner.name))?;
                    let def_in = self.arena.nodes[def_id].in_cell;
                    let def_out = self.arena.nodes[def_id].out_cell;
                    self.arena.cells.union(d_in, def_in, &path)?;
                    self.arena.cells.union(d_out, def_out, &path)?;
                }
                AKind::ForwardRef
            }
        };
        self.arena.nodes[id].kind = kind;
        Ok(id)
    }

    fn seed(&mut self, cell: usize, t: BlockType, path: &str) -> Result<()> {
        self.arena.cells.set(cell, t, path)?;
        Ok(())
    }
}
