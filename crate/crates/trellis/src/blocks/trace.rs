//! Tracing: running a typed block against concrete host data to emit an
//! invocation graph.
//!
//! Tracing never computes tensor values. Tensor-typed data flows through
//! the block tree as references to graph nodes; only the schedule executor
//! touches numbers. Host data flows through as borrowed pointers into the
//! caller's input (values produced by input transforms are owned), so
//! descending a large host structure never copies it.

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{GraphNode, InvocationGraph, ResultTree, ValueRef};
use crate::host::HostValue;
use crate::ops::OpHandle;
use crate::tensor::{DType, Tensor};
use crate::types::{BlockType, TensorType};

use super::{Block, BlockKind, Source, Wire};

/// Default recursion ceiling for forward-declaration references.
pub(crate) const DEFAULT_DEPTH_LIMIT: usize = 10_000;

/// Host data during tracing: a pointer into the caller's input, or a value
/// an input transform produced.
#[derive(Clone)]
pub(crate) enum HVal<'i> {
    Borrowed(&'i HostValue),
    Owned(Rc<HostValue>),
}

impl<'i> HVal<'i> {
    fn get(&self) -> &HostValue {
        match self {
            HVal::Borrowed(v) => v,
            HVal::Owned(v) => v,
        }
    }

    fn field(&self, name: &str) -> Result<HVal<'i>> {
        match self {
            HVal::Borrowed(v) => v.field(name).map(HVal::Borrowed),
            HVal::Owned(v) => v.field(name).map(|f| HVal::Owned(Rc::new(f.clone()))),
        }
    }

    fn list(&self) -> Result<Vec<HVal<'i>>> {
        match self {
            HVal::Borrowed(v) => Ok(v.as_list()?.iter().map(HVal::Borrowed).collect()),
            HVal::Owned(v) => Ok(v
                .as_list()?
                .iter()
                .map(|e| HVal::Owned(Rc::new(e.clone())))
                .collect()),
        }
    }
}

/// A value flowing between blocks during tracing.
#[derive(Clone)]
pub(crate) enum TValue<'i> {
    Host(HVal<'i>),
    Ref(ValueRef),
    Tuple(Vec<TValue<'i>>),
    Seq(Vec<TValue<'i>>),
    /// A broadcast value: repeats endlessly when zipped, cannot be
    /// materialized.
    Endless(Rc<TValue<'i>>),
    Void,
}

fn describe(v: &TValue) -> &'static str {
    match v {
        TValue::Host(_) => "host data",
        TValue::Ref(_) => "a tensor",
        TValue::Tuple(_) => "a tuple",
        TValue::Seq(_) => "a sequence",
        TValue::Endless(_) => "an endless sequence",
        TValue::Void => "void",
    }
}

fn terr(path: &str, message: String) -> Error {
    Error::Trace { location: path.to_string(), message }
}

fn expect_host<'i>(v: TValue<'i>, path: &str, what: &str) -> Result<HVal<'i>> {
    match v {
        TValue::Host(h) => Ok(h),
        other => Err(terr(path, format!("{what} needs host data, got {}", describe(&other)))),
    }
}

/// Accumulates graph nodes while blocks run over a batch of inputs.
pub(crate) struct Tracer<'c> {
    /// Operation identity (`Arc` pointer) to index in the compiled op list.
    op_index: &'c HashMap<usize, usize>,
    /// Name of a pairwise-add operation to its index, one per element type
    /// summed anywhere in the block.
    sum_index: &'c HashMap<String, usize>,
    nodes: Vec<GraphNode>,
    results: Vec<Vec<ValueRef>>,
    result_trees: Vec<ResultTree>,
    depth: usize,
    depth_limit: usize,
}

impl<'c> Tracer<'c> {
    pub(crate) fn new(
        op_index: &'c HashMap<usize, usize>,
        sum_index: &'c HashMap<String, usize>,
        depth_limit: usize,
    ) -> Tracer<'c> {
        Tracer {
            op_index,
            sum_index,
            nodes: Vec::new(),
            results: Vec::new(),
            result_trees: Vec::new(),
            depth: 0,
            depth_limit,
        }
    }

    /// Traces the block against one input, recording its results as the
    /// next entry of the batch.
    pub(crate) fn add_root(&mut self, block: &Block, input: &HostValue) -> Result<()> {
        let in_ty = block
            .in_type()
            .ok_or_else(|| Error::Underdetermined { location: "root".to_string() })?;
        let tv = host_to_tvalue(self, &in_ty, HVal::Borrowed(input), "root")?;
        let out = self.trace(block, tv, "root")?;
        let mut refs = Vec::new();
        let tree = flatten_result(&out, &mut refs, "root")?;
        self.results.push(refs);
        self.result_trees.push(tree);
        Ok(())
    }

    pub(crate) fn finish(self, ops: Vec<OpHandle>) -> InvocationGraph {
        InvocationGraph {
            ops,
            nodes: self.nodes,
            results: self.results,
            result_trees: self.result_trees,
        }
    }

    fn constant(&mut self, value: Tensor, ttype: TensorType) -> ValueRef {
        self.nodes.push(GraphNode::Constant { value, ttype });
        ValueRef { node: self.nodes.len() - 1, slot: 0 }
    }

    fn zeros_value<'i>(&mut self, t: &BlockType, path: &str) -> Result<TValue<'i>> {
        match t {
            BlockType::Tensor(tt) => {
                let z = Tensor::zeros(tt.dtype, &tt.shape);
                Ok(TValue::Ref(self.constant(z, tt.clone())))
            }
            BlockType::Tuple(ts) => Ok(TValue::Tuple(
                ts.iter().map(|u| self.zeros_value(u, path)).collect::<Result<_>>()?,
            )),
            other => Err(terr(path, format!("cannot produce zeros of type {other}"))),
        }
    }

    fn trace<'i>(&mut self, block: &Block, input: TValue<'i>, path: &str) -> Result<TValue<'i>> {
        match &block.kind {
            BlockKind::Scalar(dt) => {
                let hv = expect_host(input, path, "scalar")?;
                let t = match (hv.get(), dt) {
                    (HostValue::Null, _) => {
                        return Err(terr(
                            path,
                            "cannot read a number from null (wrap the block in optional \
                             to substitute zeros)"
                                .to_string(),
                        ))
                    }
                    (HostValue::Int(i), DType::Int32) => {
                        let v = i32::try_from(*i).map_err(|_| {
                            terr(path, format!("{i} does not fit a 32-bit integer"))
                        })?;
                        Tensor::scalar_i32(v)
                    }
                    (HostValue::Int(i), DType::Float32) => Tensor::scalar_f32(*i as f32),
                    (HostValue::Int(i), DType::Float64) => Tensor::scalar_f64(*i as f64),
                    (HostValue::Float(f), DType::Float32) => Tensor::scalar_f32(*f as f32),
                    (HostValue::Float(f), DType::Float64) => Tensor::scalar_f64(*f),
                    (HostValue::Float(_), DType::Int32) => {
                        return Err(terr(path, "expected an integer, found a float".to_string()))
                    }
                    (other, _) => {
                        return Err(terr(
                            path,
                            format!("expected a number, found {}", other.kind()),
                        ))
                    }
                };
                let tt = TensorType::new(*dt, &[]);
                Ok(TValue::Ref(self.constant(t, tt)))
            }

            BlockKind::TensorLit(tt) => {
                let hv = expect_host(input, path, "tensor literal")?;
                let t = coerce_host_tensor(tt, hv.get(), path)?;
                Ok(TValue::Ref(self.constant(t, tt.clone())))
            }

            BlockKind::Function(op) => {
                let mut refs = Vec::new();
                flatten_refs(&input, &mut refs).map_err(|found| {
                    terr(path, format!("operation {} takes tensors, got {found}", op.name))
                })?;
                if refs.len() != op.inputs.len() {
                    return Err(terr(
                        path,
                        format!(
                            "operation {} takes {} tensors, got {}",
                            op.name,
                            op.inputs.len(),
                            refs.len()
                        ),
                    ));
                }
                let idx = *self
                    .op_index
                    .get(&(Arc::as_ptr(op) as usize))
                    .ok_or_else(|| {
                        terr(path, format!("operation {} was not compiled in", op.name))
                    })?;
                self.nodes.push(GraphNode::Invocation { op: idx, inputs: refs });
                let node = self.nodes.len() - 1;
                if op.outputs.len() == 1 {
                    Ok(TValue::Ref(ValueRef { node, slot: 0 }))
                } else {
                    Ok(TValue::Tuple(
                        (0..op.outputs.len())
                            .map(|slot| TValue::Ref(ValueRef { node, slot }))
                            .collect(),
                    ))
                }
            }

            BlockKind::InputTransform { name, f } => {
                let hv = expect_host(input, path, "input transform")?;
                let out = f(hv.get())
                    .map_err(|e| terr(path, format!("input transform {name:?}: {e}")))?;
                Ok(TValue::Host(HVal::Owned(Rc::new(out))))
            }

            BlockKind::Pipe(a, b) => {
                if b.in_type() == Some(BlockType::Void) {
                    self.trace(b, TValue::Void, &format!("{path}/pipe[1]"))
                } else {
                    let mid = self.trace(a, input, &format!("{path}/pipe[0]"))?;
                    self.trace(b, mid, &format!("{path}/pipe[1]"))
                }
            }

            BlockKind::Record(fields) => {
                let hv = expect_host(input, path, "record")?;
                let mut outs = Vec::with_capacity(fields.len());
                for (name, blk) in fields {
                    let fv = hv.field(name).map_err(|e| terr(path, e.to_string()))?;
                    outs.push(self.trace(
                        blk,
                        TValue::Host(fv),
                        &format!("{path}/record[{name}]"),
                    )?);
                }
                Ok(TValue::Tuple(outs))
            }

            BlockKind::OneOf { key_name, key, cases } => {
                let hv = expect_host(input, path, "one_of")?;
                let k = key(hv.get())
                    .map_err(|e| terr(path, format!("key function {key_name:?}: {e}")))?;
                let Some((_, case)) = cases.iter().find(|(ck, _)| *ck == k) else {
                    let available = cases
                        .iter()
                        .map(|(ck, _)| ck.to_string())
                        .collect::<Vec<_>>()
                        .join(", ");
                    return Err(terr(
                        path,
                        format!("no case for key {k} (cases: {available})"),
                    ));
                };
                self.trace(case, TValue::Host(hv), &format!("{path}/case[{k}]"))
            }

            BlockKind::Optional(body) => {
                let hv = expect_host(input, path, "optional")?;
                if hv.get().is_null() {
                    let out = body.out_type().ok_or_else(|| Error::Underdetermined {
                        location: path.to_string(),
                    })?;
                    self.zeros_value(&out, path)
                } else {
                    self.trace(body, TValue::Host(hv), &format!("{path}/optional"))
                }
            }

            BlockKind::AllOf(children) => {
                let mut outs = Vec::with_capacity(children.len());
                for (i, c) in children.iter().enumerate() {
                    let arg = if c.in_type() == Some(BlockType::Void) {
                        TValue::Void
                    } else {
                        input.clone()
                    };
                    outs.push(self.trace(c, arg, &format!("{path}/all_of[{i}]"))?);
                }
                Ok(TValue::Tuple(outs))
            }

            BlockKind::Map(f) => {
                let child = format!("{path}/map");
                match input {
                    TValue::Host(hv) => {
                        let items = hv.list().map_err(|e| terr(path, e.to_string()))?;
                        Ok(TValue::Seq(
                            items
                                .into_iter()
                                .map(|it| self.trace(f, TValue::Host(it), &child))
                                .collect::<Result<_>>()?,
                        ))
                    }
                    TValue::Seq(items) => Ok(TValue::Seq(
                        items
                            .into_iter()
                            .map(|it| self.trace(f, it, &child))
                            .collect::<Result<_>>()?,
                    )),
                    TValue::Endless(rc) => {
                        let out = self.trace(f, (*rc).clone(), &child)?;
                        Ok(TValue::Endless(Rc::new(out)))
                    }
                    other => {
                        Err(terr(path, format!("cannot map over {}", describe(&other))))
                    }
                }
            }

            BlockKind::Fold { step, init } => {
                let mut state = self.trace(init, TValue::Void, &format!("{path}/fold.init"))?;
                let items = as_items(input, path, "fold")?;
                let child = format!("{path}/fold.step");
                for it in items {
                    state = self.trace(step, TValue::Tuple(vec![state, it]), &child)?;
                }
                Ok(state)
            }

            BlockKind::Reduce(g) => {
                let items = as_items(input, path, "reduce")?;
                if items.is_empty() {
                    return Err(terr(path, "cannot reduce an empty sequence".to_string()));
                }
                self.reduce_items(g, items, &format!("{path}/reduce"))
            }

            BlockKind::Sum => {
                let out_ty = block.out_type();
                let Some(BlockType::Tensor(tt)) = out_ty else {
                    return Err(Error::Underdetermined { location: path.to_string() });
                };
                let items = match input {
                    TValue::Seq(items) | TValue::Tuple(items) => items,
                    TValue::Endless(_) => {
                        return Err(terr(path, "cannot sum an endless sequence".to_string()))
                    }
                    other => {
                        return Err(terr(path, format!("cannot sum {}", describe(&other))))
                    }
                };
                if items.is_empty() {
                    let z = Tensor::zeros(tt.dtype, &tt.shape);
                    return Ok(TValue::Ref(self.constant(z, tt)));
                }
                let refs: Vec<ValueRef> = items
                    .iter()
                    .map(|v| match v {
                        TValue::Ref(r) => Ok(*r),
                        other => {
                            Err(terr(path, format!("cannot sum {}", describe(other))))
                        }
                    })
                    .collect::<Result<_>>()?;
                let add_name = format!("add({tt})");
                let add_idx = *self.sum_index.get(&add_name).ok_or_else(|| {
                    terr(path, format!("operation {add_name} was not compiled in"))
                })?;
                Ok(TValue::Ref(self.sum_refs(add_idx, &refs)))
            }

            BlockKind::ZipWith(f) => {
                let TValue::Tuple(seqs) = input else {
                    return Err(terr(
                        path,
                        format!("cannot zip {}", describe(&input)),
                    ));
                };
                enum ZipSeq<'i> {
                    Items(Vec<TValue<'i>>),
                    Every(TValue<'i>),
                }
                let seqs: Vec<ZipSeq> = seqs
                    .into_iter()
                    .map(|s| match s {
                        TValue::Seq(items) => Ok(ZipSeq::Items(items)),
                        TValue::Host(hv) => {
                            let items = hv.list().map_err(|e| terr(path, e.to_string()))?;
                            Ok(ZipSeq::Items(items.into_iter().map(TValue::Host).collect()))
                        }
                        TValue::Endless(rc) => Ok(ZipSeq::Every((*rc).clone())),
                        other => {
                            Err(terr(path, format!("cannot zip {}", describe(&other))))
                        }
                    })
                    .collect::<Result<_>>()?;
                let len = seqs
                    .iter()
                    .filter_map(|s| match s {
                        ZipSeq::Items(items) => Some(items.len()),
                        ZipSeq::Every(_) => None,
                    })
                    .min()
                    .ok_or_else(|| {
                        terr(path, "cannot zip only endless sequences".to_string())
                    })?;
                let child = format!("{path}/zip_with");
                let mut outs = Vec::with_capacity(len);
                for i in 0..len {
                    let elems: Vec<TValue> = seqs
                        .iter()
                        .map(|s| match s {
                            ZipSeq::Items(items) => items[i].clone(),
                            ZipSeq::Every(t) => t.clone(),
                        })
                        .collect();
                    outs.push(self.trace(f, TValue::Tuple(elems), &child)?);
                }
                Ok(TValue::Seq(outs))
            }

            BlockKind::Broadcast => Ok(TValue::Endless(Rc::new(input))),

            BlockKind::Zeros(t) => self.zeros_value(t, path),

            BlockKind::Composition(graph) => {
                let mut values: Vec<Option<TValue>> =
                    (0..graph.nodes.len()).map(|_| None).collect();
                for &idx in &graph.order {
                    let node = &graph.nodes[idx];
                    let arg = match node.reads.len() {
                        0 => TValue::Void,
                        1 => resolve_wire(&values, &input, &node.reads[0], path)?,
                        _ => TValue::Tuple(
                            node.reads
                                .iter()
                                .map(|w| resolve_wire(&values, &input, w, path))
                                .collect::<Result<_>>()?,
                        ),
                    };
                    let out = self.trace(&node.block, arg, &format!("{path}/node[{idx}]"))?;
                    values[idx] = Some(out);
                }
                match graph.output.len() {
                    1 => resolve_wire(&values, &input, &graph.output[0], path),
                    _ => Ok(TValue::Tuple(
                        graph
                            .output
                            .iter()
                            .map(|w| resolve_wire(&values, &input, w, path))
                            .collect::<Result<_>>()?,
                    )),
                }
            }

            BlockKind::ForwardRef(weak) => {
                let inner = weak.upgrade().ok_or_else(|| {
                    terr(path, "forward declaration was dropped".to_string())
                })?;
                let resolved = inner.resolved.borrow();
                let Some(body) = resolved.as_ref() else {
                    return Err(Error::InvalidBlock {
                        location: path.to_string(),
                        message: format!(
                            "forward declaration {:?} is not resolved",
                            inner.name
                        ),
                    });
                };
                if self.depth >= self.depth_limit {
                    return Err(Error::TraceDepthLimit {
                        limit: self.depth_limit,
                        location: path.to_string(),
                    });
                }
                self.depth += 1;
                // Recursive models recurse as deep as their input nests;
                // grow the stack instead of trusting the thread's.
                let out = stacker::maybe_grow(64 * 1024, 1024 * 1024, || {
                    self.trace(body, input, &format!("def({})", inner.name))
                });
                self.depth -= 1;
                out
            }
        }
    }

    /// Pairwise sum with a balanced, logarithmic-depth split.
    fn sum_refs(&mut self, add_idx: usize, refs: &[ValueRef]) -> ValueRef {
        if refs.len() == 1 {
            return refs[0];
        }
        let mid = refs.len() / 2;
        let l = self.sum_refs(add_idx, &refs[..mid]);
        let r = self.sum_refs(add_idx, &refs[mid..]);
        self.nodes.push(GraphNode::Invocation { op: add_idx, inputs: vec![l, r] });
        ValueRef { node: self.nodes.len() - 1, slot: 0 }
    }

    /// Pairwise reduce with the same balanced split as [`Tracer::sum_refs`].
    fn reduce_items<'i>(
        &mut self,
        g: &Block,
        mut items: Vec<TValue<'i>>,
        path: &str,
    ) -> Result<TValue<'i>> {
        if items.len() == 1 {
            return Ok(items.pop().unwrap());
        }
        let right = items.split_off(items.len() / 2);
        let l = self.reduce_items(g, items, path)?;
        let r = self.reduce_items(g, right, path)?;
        self.trace(g, TValue::Tuple(vec![l, r]), path)
    }
}

/// Splits a sequence-typed value into its elements for fold and reduce.
fn as_items<'i>(input: TValue<'i>, path: &str, what: &str) -> Result<Vec<TValue<'i>>> {
    match input {
        TValue::Host(hv) => {
            let items = hv.list().map_err(|e| terr(path, e.to_string()))?;
            Ok(items.into_iter().map(TValue::Host).collect())
        }
        TValue::Seq(items) => Ok(items),
        TValue::Endless(_) => {
            Err(terr(path, format!("cannot {what} an endless sequence")))
        }
        other => Err(terr(path, format!("cannot {what} over {}", describe(&other)))),
    }
}

fn flatten_refs(v: &TValue, out: &mut Vec<ValueRef>) -> std::result::Result<(), &'static str> {
    match v {
        TValue::Ref(r) => {
            out.push(*r);
            Ok(())
        }
        TValue::Tuple(items) => {
            for it in items {
                flatten_refs(it, out)?;
            }
            Ok(())
        }
        other => Err(describe(other)),
    }
}

fn resolve_wire<'i>(
    values: &[Option<TValue<'i>>],
    input: &TValue<'i>,
    w: &Wire,
    path: &str,
) -> Result<TValue<'i>> {
    let base = match w.src {
        Source::Input => input.clone(),
        Source::Node(j) => values[j].clone().ok_or_else(|| {
            terr(path, format!("node {j} is read before the wiring order runs it"))
        })?,
    };
    match w.field {
        None => Ok(base),
        Some(i) => match base {
            TValue::Tuple(mut items) => {
                if i < items.len() {
                    Ok(items.swap_remove(i))
                } else {
                    Err(terr(
                        path,
                        format!("field {i} is out of range for a {}-tuple", items.len()),
                    ))
                }
            }
            other => Err(terr(
                path,
                format!("cannot project field {i} from {}", describe(&other)),
            )),
        },
    }
}

fn flatten_result(v: &TValue, refs: &mut Vec<ValueRef>, path: &str) -> Result<ResultTree> {
    match v {
        TValue::Ref(r) => {
            refs.push(*r);
            Ok(ResultTree::Leaf(refs.len() - 1))
        }
        TValue::Tuple(items) => Ok(ResultTree::Tuple(
            items.iter().map(|it| flatten_result(it, refs, path)).collect::<Result<_>>()?,
        )),
        TValue::Seq(items) => Ok(ResultTree::Seq(
            items.iter().map(|it| flatten_result(it, refs, path)).collect::<Result<_>>()?,
        )),
        TValue::Void => Ok(ResultTree::Void),
        TValue::Host(_) => Err(terr(
            path,
            "the model's output must be tensors, but host data reached the output"
                .to_string(),
        )),
        TValue::Endless(_) => Err(terr(
            path,
            "the model's output must be finite tensors, but an endless sequence reached \
             the output"
                .to_string(),
        )),
    }
}

/// Converts typed host data into a traced value: tensor leaves become
/// constant nodes, lists become tuples or sequences per the type.
pub(crate) fn host_to_tvalue<'i>(
    tracer: &mut Tracer,
    ty: &BlockType,
    v: HVal<'i>,
    path: &str,
) -> Result<TValue<'i>> {
    match ty {
        BlockType::Input => Ok(TValue::Host(v)),
        BlockType::Void => Ok(TValue::Void),
        BlockType::Tensor(tt) => {
            let t = coerce_host_tensor(tt, v.get(), path)?;
            Ok(TValue::Ref(tracer.constant(t, tt.clone())))
        }
        BlockType::Tuple(ts) => {
            let items = v.list().map_err(|e| terr(path, e.to_string()))?;
            if items.len() != ts.len() {
                return Err(terr(
                    path,
                    format!("expected {} values for {ty}, found {}", ts.len(), items.len()),
                ));
            }
            Ok(TValue::Tuple(
                ts.iter()
                    .zip(items)
                    .map(|(t, it)| host_to_tvalue(tracer, t, it, path))
                    .collect::<Result<_>>()?,
            ))
        }
        BlockType::Seq(t) => {
            let items = v.list().map_err(|e| terr(path, e.to_string()))?;
            Ok(TValue::Seq(
                items
                    .into_iter()
                    .map(|it| host_to_tvalue(tracer, t, it, path))
                    .collect::<Result<_>>()?,
            ))
        }
    }
}

/// Reads a tensor of exactly the given type out of host data: an existing
/// tensor, a bare number for rank 0, or nested number lists matching the
/// shape.
fn coerce_host_tensor(tt: &TensorType, v: &HostValue, path: &str) -> Result<Tensor> {
    if let HostValue::Tensor(t) = v {
        if t.dtype() == tt.dtype && t.shape() == &tt.shape[..] {
            return Ok(t.clone());
        }
        return Err(terr(
            path,
            format!("expected a {tt} tensor, found {}[{:?}]", t.dtype(), t.shape()),
        ));
    }
    let mut vals = Vec::with_capacity(tt.item_len());
    collect_numbers(v, &tt.shape, tt.dtype, &mut vals, path)?;
    Tensor::from_f64_values(tt.dtype, &tt.shape, &vals)
}

fn collect_numbers(
    v: &HostValue,
    shape: &[usize],
    dtype: DType,
    out: &mut Vec<f64>,
    path: &str,
) -> Result<()> {
    match shape.split_first() {
        None => match v {
            HostValue::Int(i) => {
                out.push(*i as f64);
                Ok(())
            }
            HostValue::Float(f) => {
                if dtype == DType::Int32 {
                    return Err(terr(path, "expected an integer, found a float".to_string()));
                }
                out.push(*f);
                Ok(())
            }
            other => Err(terr(path, format!("expected a number, found {}", other.kind()))),
        },
        Some((&dim, rest)) => {
            let items = v.as_list().map_err(|e| terr(path, e.to_string()))?;
            if items.len() != dim {
                return Err(terr(
                    path,
                    format!("expected {dim} elements, found {}", items.len()),
                ));
            }
            for it in items {
                collect_numbers(it, rest, dtype, out, path)?;
            }
            Ok(())
        }
    }
}
