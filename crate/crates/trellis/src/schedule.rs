//! Compiles an invocation graph into a depth-ordered batch schedule.
//!
//! All invocations of one operation at one depth run as a single batched
//! kernel call. Values live in per-(depth, tensor type) states: the rows
//! produced at a depth for a given type, concatenated in group order. Each
//! value is addressed by an [`EdgeLabel`] `(depth, type, index)`; a group's
//! gather lists pull its input rows out of the previous depth's states, and
//! its outputs occupy a contiguous run of rows per output slot.
//!
//! Within one depth, groups run user operations first (in operation order)
//! and then pass-throughs (one pseudo-group per tensor type). The layout is
//! fully deterministic, so the same graph always dumps byte-identical text.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::graph::{GraphNode, InvocationGraph, ValueRef};
use crate::types::TensorType;

/// Address of one value in the per-depth states: row `index` of the
/// `(depth, ttype)` state. `ttype` indexes [`Schedule::types`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgeLabel {
    pub depth: usize,
    pub ttype: usize,
    pub index: usize,
}

/// What a batched group runs: a user operation (index into the graph's op
/// table) or an identity copy of one tensor type across a depth boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum GroupOp {
    User(usize),
    Pass(usize),
}

/// One batched kernel call: every instance of one operation at one depth.
#[derive(Debug)]
pub struct OpGroup {
    pub op: GroupOp,
    /// Graph nodes batched into this call, in node-id order.
    pub instances: Vec<usize>,
    /// Per input slot, the rows to gather from the previous depth's state
    /// for the slot's tensor type; one index per instance.
    pub gathers: Vec<Vec<usize>>,
    /// Per output slot: the slot's tensor type and the first row its
    /// instances occupy in this depth's state for that type. The slot's
    /// rows are contiguous: `base .. base + instances.len()`.
    pub outputs: Vec<(usize, usize)>,
}

impl OpGroup {
    pub fn size(&self) -> usize {
        self.instances.len()
    }
}

/// A compiled batch schedule.
#[derive(Debug)]
pub struct Schedule {
    /// Tensor types in first-use order; `EdgeLabel::ttype` and the type
    /// fields of groups index this table.
    pub types: Vec<TensorType>,
    /// Depth-0 states: per tensor type, the constant nodes stacked into
    /// that state, in node order. Constants are not deduplicated.
    pub constants: Vec<(usize, Vec<usize>)>,
    /// Depths 1.. in execution order; `depths[i]` runs at depth `i + 1`.
    pub depths: Vec<Vec<OpGroup>>,
    /// Rows of every state: `rows[d]` maps type id to the row count of the
    /// `(d, type)` state.
    pub rows: Vec<BTreeMap<usize, usize>>,
    /// Per traced input, the label of each of its result values.
    pub results: Vec<Vec<EdgeLabel>>,
}

#[derive(Default)]
struct TypeInterner {
    types: Vec<TensorType>,
    index: HashMap<TensorType, usize>,
}

impl TypeInterner {
    fn intern(&mut self, t: &TensorType) -> usize {
        if let Some(&i) = self.index.get(t) {
            return i;
        }
        let i = self.types.len();
        self.types.push(t.clone());
        self.index.insert(t.clone(), i);
        i
    }
}

impl Schedule {
    /// Plans the batched execution of `graph`, inserting the pass-through
    /// nodes the plan needs. Group order, row layout, and labels depend
    /// only on the graph, so equal graphs produce byte-identical dumps.
    pub fn build(graph: &mut InvocationGraph) -> Result<Schedule> {
        let depth = graph.insert_pass_throughs();
        let max_depth = depth.iter().copied().max().unwrap_or(0);

        let mut interner = TypeInterner::default();
        let mut labels: HashMap<ValueRef, EdgeLabel> = HashMap::new();
        let mut rows: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); max_depth + 1];

        let mut const_groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, node) in graph.nodes.iter().enumerate() {
            if let GraphNode::Constant { ttype, .. } = node {
                let t = interner.intern(ttype);
                let rows0 = rows[0].entry(t).or_insert(0);
                labels.insert(
                    ValueRef { node: i, slot: 0 },
                    EdgeLabel { depth: 0, ttype: t, index: *rows0 },
                );
                *rows0 += 1;
                const_groups.entry(t).or_default().push(i);
            }
        }

        let mut depths: Vec<Vec<OpGroup>> = Vec::with_capacity(max_depth);
        for d in 1..=max_depth {
            let mut members: BTreeMap<GroupOp, Vec<usize>> = BTreeMap::new();
            for (i, node) in graph.nodes.iter().enumerate() {
                if depth[i] != d {
                    continue;
                }
                let key = match node {
                    GraphNode::Invocation { op, .. } => GroupOp::User(*op),
                    GraphNode::PassThrough { ttype, .. } => GroupOp::Pass(interner.intern(ttype)),
                    GraphNode::Constant { .. } => {
                        return Err(Error::Schedule(format!(
                            "constant node {i} assigned depth {d}"
                        )))
                    }
                };
                members.entry(key).or_default().push(i);
            }

            let mut groups = Vec::with_capacity(members.len());
            for (key, instances) in members {
                let (in_types, out_types): (Vec<TensorType>, Vec<TensorType>) = match key {
                    GroupOp::User(op) => {
                        let op = &graph.ops[op];
                        (op.inputs.clone(), op.outputs.clone())
                    }
                    GroupOp::Pass(t) => {
                        let tt = interner.types[t].clone();
                        (vec![tt.clone()], vec![tt])
                    }
                };

                let mut gathers = vec![Vec::with_capacity(instances.len()); in_types.len()];
                for &n in &instances {
                    let inputs: Vec<ValueRef> = match &graph.nodes[n] {
                        GraphNode::Invocation { inputs, .. } => inputs.clone(),
                        GraphNode::PassThrough { input, .. } => vec![*input],
                        GraphNode::Constant { .. } => unreachable!(),
                    };
                    if inputs.len() != in_types.len() {
                        return Err(Error::Schedule(format!(
                            "node {n} supplies {} inputs where its operation takes {}",
                            inputs.len(),
                            in_types.len()
                        )));
                    }
                    for (s, r) in inputs.iter().enumerate() {
                        let lab = labels.get(r).ok_or_else(|| {
                            Error::Schedule(format!(
                                "node {n} reads a value that was never scheduled"
                            ))
                        })?;
                        let want = interner.intern(&in_types[s]);
                        if lab.depth != d - 1 || lab.ttype != want {
                            return Err(Error::Schedule(format!(
                                "node {n} input {s} is at (depth {}, {}) but the \
                                 group runs at depth {d} expecting {}",
                                lab.depth, interner.types[lab.ttype], interner.types[want]
                            )));
                        }
                        gathers[s].push(lab.index);
                    }
                }

                let mut outputs = Vec::with_capacity(out_types.len());
                for (slot, ot) in out_types.iter().enumerate() {
                    let t = interner.intern(ot);
                    let base = rows[d].entry(t).or_insert(0);
                    outputs.push((t, *base));
                    for (p, &n) in instances.iter().enumerate() {
                        labels.insert(
                            ValueRef { node: n, slot },
                            EdgeLabel { depth: d, ttype: t, index: *base + p },
                        );
                    }
                    *base += instances.len();
                }

                groups.push(OpGroup { op: key, instances, gathers, outputs });
            }
            depths.push(groups);
        }

        let mut results = Vec::with_capacity(graph.results.len());
        for refs in &graph.results {
            let mut out = Vec::with_capacity(refs.len());
            for r in refs {
                let lab = labels.get(r).ok_or_else(|| {
                    Error::Schedule(format!(
                        "result references node {} slot {}, which was never scheduled",
                        r.node, r.slot
                    ))
                })?;
                out.push(*lab);
            }
            results.push(out);
        }

        Ok(Schedule {
            types: interner.types,
            constants: const_groups.into_iter().collect(),
            depths,
            rows,
            results,
        })
    }

    /// Total depth count, constants included.
    pub fn depth_count(&self) -> usize {
        self.depths.len() + 1
    }

    /// Batched kernel calls per user operation name, pass-through groups
    /// excluded.
    pub fn calls_per_op(&self, graph: &InvocationGraph) -> BTreeMap<String, usize> {
        let mut calls = BTreeMap::new();
        for groups in &self.depths {
            for g in groups {
                if let GroupOp::User(op) = g.op {
                    *calls.entry(graph.ops[op].name.clone()).or_insert(0) += 1;
                }
            }
        }
        calls
    }

    /// Renders the schedule as stable plain text, one line per constant
    /// state, one per group, one per result value.
    pub fn dump(&self, graph: &InvocationGraph) -> String {
        let mut out = String::new();
        for (t, nodes) in &self.constants {
            let _ = writeln!(
                out,
                "d=0 op=const rows={} type={}",
                nodes.len(),
                self.types[*t]
            );
        }
        for (i, groups) in self.depths.iter().enumerate() {
            let d = i + 1;
            for g in groups {
                let name = match g.op {
                    GroupOp::User(op) => graph.ops[op].name.as_str(),
                    GroupOp::Pass(_) => "pass",
                };
                let _ = write!(out, "d={d} op={name}");
                for (s, idx) in g.gathers.iter().enumerate() {
                    let list: Vec<String> = idx.iter().map(|i| i.to_string()).collect();
                    let _ = write!(out, " in{s}=[{}]", list.join(","));
                }
                let types: Vec<String> = g
                    .outputs
                    .iter()
                    .map(|(t, _)| self.types[*t].to_string())
                    .collect();
                let _ = writeln!(out, " out_rows={} type={}", g.size(), types.join(","));
            }
        }
        for (gi, labs) in self.results.iter().enumerate() {
            for (ri, lab) in labs.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "result[{gi}][{ri}] = ({}, {}, {})",
                    lab.depth, self.types[lab.ttype], lab.index
                );
            }
        }
        out
    }
}
