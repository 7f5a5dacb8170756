//! Executes compiled schedules over dense per-depth states.
//!
//! Forward walks the depths in order: gather each group's input rows from
//! the previous depth's states, run the batched kernel once, and copy its
//! outputs into this depth's states. In training mode every state and each
//! group's tape (inputs, saved values, outputs) are retained; inference
//! drops a depth's states as soon as the next depth no longer needs them.
//!
//! Backward walks the depths in reverse, pushing gradients through the same
//! gather/concat plumbing: output-slot gradients are sliced out of the
//! depth's gradient states, each kernel's backward runs once per group, and
//! input gradients scatter-add into the previous depth (duplicate gathers
//! accumulate, matching the chain rule for fan-out).

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{GraphNode, InvocationGraph};
use crate::kernels;
use crate::ops::Mode;
use crate::runtime::params::ParameterStore;
use crate::schedule::{GroupOp, Schedule};
use crate::tensor::Tensor;

/// Counters from one forward pass.
#[derive(Debug, Default, Clone)]
pub struct RunStats {
    /// Batched kernel calls per operation name.
    pub kernel_calls: BTreeMap<String, usize>,
    /// Rows processed per operation name, summed over calls.
    pub kernel_rows: BTreeMap<String, usize>,
    /// Pass-through groups executed.
    pub pass_calls: usize,
    /// Rows copied by pass-through groups.
    pub pass_rows: usize,
}

struct Tape {
    inputs: Vec<Tensor>,
    saved: Vec<Tensor>,
    outputs: Vec<Tensor>,
}

/// A finished forward pass: per-input results plus, in training mode, the
/// per-group tapes the backward pass replays. States are dropped as soon
/// as the next depth has consumed them; the tapes hold the gathered
/// inputs, so backward never rereads a state.
pub struct ForwardRun {
    mode: Mode,
    tapes: Vec<Vec<Option<Tape>>>,
    /// Per traced input, its result values, item-shaped.
    pub results: Vec<Vec<Tensor>>,
    pub stats: RunStats,
}

/// Runs a compiled schedule forward. `mode` decides whether states and
/// tapes are retained for a later [`run_backward`].
pub fn run_forward(
    graph: &InvocationGraph,
    schedule: &Schedule,
    params: &ParameterStore,
    mode: Mode,
) -> Result<ForwardRun> {
    let max_depth = schedule.depths.len();
    let mut states: Vec<BTreeMap<usize, Tensor>> = Vec::with_capacity(max_depth + 1);
    let mut tapes: Vec<Vec<Option<Tape>>> = Vec::with_capacity(max_depth);
    let mut stats = RunStats::default();

    let mut state0 = BTreeMap::new();
    for (t, nodes) in &schedule.constants {
        let items: Vec<&Tensor> = nodes
            .iter()
            .map(|&n| match &graph.nodes[n] {
                GraphNode::Constant { value, .. } => Ok(value),
                _ => Err(Error::Schedule(format!("node {n} listed as constant"))),
            })
            .collect::<Result<_>>()?;
        state0.insert(*t, kernels::stack_rows(&items)?);
    }
    states.push(state0);

    let mut results: Vec<Vec<Option<Tensor>>> = schedule
        .results
        .iter()
        .map(|labs| vec![None; labs.len()])
        .collect();
    let extract = |states: &[BTreeMap<usize, Tensor>],
                   d: usize,
                   results: &mut Vec<Vec<Option<Tensor>>>|
     -> Result<()> {
        for (gi, labs) in schedule.results.iter().enumerate() {
            for (ri, lab) in labs.iter().enumerate() {
                if lab.depth != d {
                    continue;
                }
                let state = states[d].get(&lab.ttype).ok_or_else(|| {
                    Error::Schedule(format!("result state missing at depth {d}"))
                })?;
                let row = kernels::slice_rows(state, lab.index, 1)?;
                let item = schedule.types[lab.ttype].clone();
                results[gi][ri] = Some(row.reshape(&item.shape)?);
            }
        }
        Ok(())
    };
    extract(&states, 0, &mut results)?;

    for d in 1..=max_depth {
        let mut state: BTreeMap<usize, Tensor> = BTreeMap::new();
        for (&t, &rows) in &schedule.rows[d] {
            let shape = schedule.types[t].batched_shape(rows);
            state.insert(t, Tensor::zeros(schedule.types[t].dtype, &shape));
        }
        let mut depth_tapes = Vec::with_capacity(schedule.depths[d - 1].len());

        for group in &schedule.depths[d - 1] {
            let in_types: Vec<usize> = match group.op {
                GroupOp::User(op) => graph.ops[op]
                    .inputs
                    .iter()
                    .map(|tt| type_id(schedule, tt))
                    .collect::<Result<_>>()?,
                GroupOp::Pass(t) => vec![t],
            };
            let mut xs = Vec::with_capacity(in_types.len());
            for (slot, &t) in in_types.iter().enumerate() {
                let src = states[d - 1].get(&t).ok_or_else(|| {
                    Error::Schedule(format!(
                        "depth {d} reads a missing ({}, {}) state",
                        d - 1,
                        schedule.types[t]
                    ))
                })?;
                xs.push(kernels::gather_rows(src, &group.gathers[slot])?);
            }

            match group.op {
                GroupOp::Pass(_) => {
                    let (t, base) = group.outputs[0];
                    let dst = state.get_mut(&t).expect("pass state preallocated");
                    kernels::copy_rows_into(dst, base, &xs[0])?;
                    stats.pass_calls += 1;
                    stats.pass_rows += group.size();
                    if mode == Mode::Train {
                        depth_tapes.push(None);
                    }
                }
                GroupOp::User(op) => {
                    let operation = &graph.ops[op];
                    let out = operation
                        .kernel
                        .forward(&xs, params, mode)
                        .map_err(|e| e.in_op(&operation.name, d))?;
                    if out.outputs.len() != group.outputs.len() {
                        return Err(Error::Kernel {
                            op: operation.name.clone(),
                            depth: d,
                            message: format!(
                                "kernel returned {} outputs, schedule expects {}",
                                out.outputs.len(),
                                group.outputs.len()
                            ),
                        });
                    }
                    for (slot, y) in out.outputs.iter().enumerate() {
                        let (t, base) = group.outputs[slot];
                        let dst = state.get_mut(&t).expect("state preallocated");
                        kernels::copy_rows_into(dst, base, y)
                            .map_err(|e| e.in_op(&operation.name, d))?;
                    }
                    *stats.kernel_calls.entry(operation.name.clone()).or_insert(0) += 1;
                    *stats.kernel_rows.entry(operation.name.clone()).or_insert(0) +=
                        group.size();
                    if mode == Mode::Train {
                        depth_tapes.push(Some(Tape {
                            inputs: xs,
                            saved: out.saved,
                            outputs: out.outputs,
                        }));
                    }
                }
            }
        }

        states.push(state);
        extract(&states, d, &mut results)?;
        states[d - 1] = BTreeMap::new();
        if mode == Mode::Train {
            tapes.push(depth_tapes);
        }
    }

    let results = results
        .into_iter()
        .enumerate()
        .map(|(gi, vals)| {
            vals.into_iter()
                .enumerate()
                .map(|(ri, v)| {
                    v.ok_or_else(|| {
                        Error::Schedule(format!("result[{gi}][{ri}] was never extracted"))
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(ForwardRun { mode, tapes, results, stats })
}

fn type_id(schedule: &Schedule, tt: &crate::types::TensorType) -> Result<usize> {
    schedule
        .types
        .iter()
        .position(|u| u == tt)
        .ok_or_else(|| Error::Schedule(format!("type {tt} missing from the schedule")))
}

/// Gradients of one backward pass: parameter name to accumulated gradient.
pub type ParamGrads = BTreeMap<String, Tensor>;

/// Runs the backward pass of a training-mode forward. `result_grads`
/// mirrors [`ForwardRun::results`]: an item-shaped gradient per result
/// value, or `None` where no gradient flows in.
pub fn run_backward(
    graph: &InvocationGraph,
    schedule: &Schedule,
    params: &ParameterStore,
    run: &ForwardRun,
    result_grads: &[Vec<Option<Tensor>>],
) -> Result<ParamGrads> {
    if run.mode != Mode::Train {
        return Err(Error::Config(
            "backward needs a forward pass run in training mode".into(),
        ));
    }
    if result_grads.len() != schedule.results.len() {
        return Err(Error::Config(format!(
            "got gradients for {} inputs, schedule has {}",
            result_grads.len(),
            schedule.results.len()
        )));
    }

    let max_depth = schedule.depths.len();
    let mut dstates: Vec<BTreeMap<usize, Tensor>> = vec![BTreeMap::new(); max_depth + 1];
    let zero_state = |d: usize, t: usize| -> Tensor {
        let rows = schedule.rows[d][&t];
        Tensor::zeros(
            schedule.types[t].dtype,
            &schedule.types[t].batched_shape(rows),
        )
    };

    for (gi, grads) in result_grads.iter().enumerate() {
        if grads.len() != schedule.results[gi].len() {
            return Err(Error::Config(format!(
                "input {gi} has {} result gradients, expected {}",
                grads.len(),
                schedule.results[gi].len()
            )));
        }
        for (ri, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let lab = schedule.results[gi][ri];
            let item = &schedule.types[lab.ttype];
            if g.dtype() != item.dtype || g.shape() != item.shape {
                return Err(Error::Config(format!(
                    "result[{gi}][{ri}] gradient is {} {:?}, expected {item}",
                    g.dtype(),
                    g.shape()
                )));
            }
            let row = g.clone().reshape(&item.batched_shape(1))?;
            let dst = dstates[lab.depth]
                .entry(lab.ttype)
                .or_insert_with(|| zero_state(lab.depth, lab.ttype));
            kernels::add_rows_into(dst, &[lab.index], &row)?;
        }
    }

    let mut param_grads: ParamGrads = BTreeMap::new();
    for d in (1..=max_depth).rev() {
        for (gi, group) in schedule.depths[d - 1].iter().enumerate() {
            if !group.outputs.iter().any(|(t, _)| dstates[d].contains_key(t)) {
                continue;
            }
            let mut dys = Vec::with_capacity(group.outputs.len());
            for &(t, base) in &group.outputs {
                let dy = match dstates[d].get(&t) {
                    Some(state) => kernels::slice_rows(state, base, group.size())?,
                    None => {
                        let shape = schedule.types[t].batched_shape(group.size());
                        Tensor::zeros(schedule.types[t].dtype, &shape)
                    }
                };
                dys.push(dy);
            }

            match group.op {
                GroupOp::Pass(t) => {
                    let dst = dstates[d - 1]
                        .entry(t)
                        .or_insert_with(|| zero_state(d - 1, t));
                    kernels::add_rows_into(dst, &group.gathers[0], &dys[0])?;
                }
                GroupOp::User(op) => {
                    let operation = &graph.ops[op];
                    let tape = run.tapes[d - 1][gi].as_ref().ok_or_else(|| {
                        Error::Schedule(format!(
                            "no tape for {} at depth {d}",
                            operation.name
                        ))
                    })?;
                    let grads = operation
                        .kernel
                        .backward(&tape.inputs, &tape.saved, &tape.outputs, &dys, params)
                        .map_err(|e| e.in_op(&operation.name, d))?;
                    for (slot, dx) in grads.input_grads.into_iter().enumerate() {
                        let Some(dx) = dx else { continue };
                        let t = type_id(schedule, &operation.inputs[slot])?;
                        let dst = dstates[d - 1]
                            .entry(t)
                            .or_insert_with(|| zero_state(d - 1, t));
                        kernels::add_rows_into(dst, &group.gathers[slot], &dx)
                            .map_err(|e| e.in_op(&operation.name, d))?;
                    }
                    for (name, g) in grads.param_grads {
                        match param_grads.get_mut(&name) {
                            Some(acc) => kernels::add_into(acc, &g)?,
                            None => {
                                param_grads.insert(name, g);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(param_grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{ResultTree, ValueRef};
    use crate::ops::{embedding, fully_connected, Activation};
    use crate::runtime::params::ParameterStore;
    use crate::tensor::DType;
    use crate::testutil::seeded_rng;
    use crate::types::TensorType;

    fn tree_graph(leaning: bool) -> InvocationGraph {
        let embed = embedding("embed", 10, 3, DType::Float64);
        let cell = fully_connected("cell", &[3, 3], 3, Activation::Tanh, DType::Float64);
        let mut g = InvocationGraph {
            ops: vec![embed, cell],
            nodes: vec![],
            results: vec![],
            result_trees: vec![],
        };
        let word = |g: &mut InvocationGraph, w: i32| -> ValueRef {
            g.nodes.push(GraphNode::Constant {
                value: Tensor::scalar_i32(w),
                ttype: TensorType::i32(&[]),
            });
            let c = ValueRef { node: g.nodes.len() - 1, slot: 0 };
            g.nodes.push(GraphNode::Invocation { op: 0, inputs: vec![c] });
            ValueRef { node: g.nodes.len() - 1, slot: 0 }
        };
        let e1 = word(&mut g, 1);
        let e2 = word(&mut g, 2);
        let e3 = word(&mut g, 3);
        let root = if leaning {
            g.nodes.push(GraphNode::Invocation { op: 1, inputs: vec![e1, e2] });
            let c12 = ValueRef { node: g.nodes.len() - 1, slot: 0 };
            g.nodes.push(GraphNode::Invocation { op: 1, inputs: vec![c12, e3] });
            ValueRef { node: g.nodes.len() - 1, slot: 0 }
        } else {
            g.nodes.push(GraphNode::Invocation { op: 1, inputs: vec![e1, e2] });
            ValueRef { node: g.nodes.len() - 1, slot: 0 }
        };
        g.results.push(vec![root]);
        g.result_trees.push(ResultTree::Leaf(0));
        g
    }

    fn init_params(g: &InvocationGraph, seed: u64) -> ParameterStore {
        let mut params = ParameterStore::new();
        let mut rng = seeded_rng(seed);
        for op in &g.ops {
            for spec in &op.params {
                params.ensure_init(spec, &mut rng).unwrap();
            }
        }
        params
    }

    fn eval_by_hand(g: &InvocationGraph, params: &ParameterStore) -> Vec<f64> {
        let mut vals: Vec<Vec<Tensor>> = Vec::new();
        for node in &g.nodes {
            let out = match node {
                GraphNode::Constant { value, .. } => {
                    vec![value.clone().reshape(&[1]).unwrap()]
                }
                GraphNode::Invocation { op, inputs } => {
                    let xs: Vec<Tensor> = inputs
                        .iter()
                        .map(|r| {
                            let v = &vals[r.node][r.slot];
                            let mut shape = vec![1];
                            shape.extend_from_slice(v.shape());
                            v.clone().reshape(&shape).unwrap()
                        })
                        .collect();
                    g.ops[*op]
                        .kernel
                        .forward(&xs, params, Mode::Infer)
                        .unwrap()
                        .outputs
                        .into_iter()
                        .map(|y| {
                            let shape: Vec<usize> = y.shape()[1..].to_vec();
                            y.reshape(&shape).unwrap()
                        })
                        .collect()
                }
                GraphNode::PassThrough { input, .. } => {
                    vec![vals[input.node][input.slot].clone()]
                }
            };
            vals.push(out);
        }
        let r = g.results[0][0];
        vals[r.node][r.slot].to_f64_vec()
    }

    #[test]
    fn batched_forward_matches_unbatched_evaluation() {
        for leaning in [false, true] {
            let mut g = tree_graph(leaning);
            let params = init_params(&g, 7);
            let want = eval_by_hand(&g, &params);
            let s = Schedule::build(&mut g).unwrap();
            let run = run_forward(&g, &s, &params, Mode::Infer).unwrap();
            let got = run.results[0][0].to_f64_vec();
            assert_eq!(want.len(), got.len());
            for (a, b) in want.iter().zip(&got) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn stats_count_batched_calls_not_invocations() {
        let mut g = tree_graph(true);
        let params = init_params(&g, 3);
        let s = Schedule::build(&mut g).unwrap();
        let run = run_forward(&g, &s, &params, Mode::Train).unwrap();
        assert_eq!(run.stats.kernel_calls["embed"], 1);
        assert_eq!(run.stats.kernel_calls["cell"], 2);
        assert_eq!(run.stats.pass_calls, 1);
        assert_eq!(run.stats.pass_rows, 1);
        assert_eq!(run.stats.kernel_rows["embed"], 3);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut g = tree_graph(true);
        let mut params = init_params(&g, 11);
        let s = Schedule::build(&mut g).unwrap();

        let loss = |params: &ParameterStore| -> f64 {
            let run = run_forward(&g, &s, params, Mode::Infer).unwrap();
            run.results[0][0].to_f64_vec().iter().sum()
        };

        let run = run_forward(&g, &s, &params, Mode::Train).unwrap();
        let seed = Tensor::from_f64(&[3], vec![1.0, 1.0, 1.0]).unwrap();
        let grads =
            run_backward(&g, &s, &params, &run, &[vec![Some(seed)]]).unwrap();

        let names: Vec<String> = params.names();
        for name in names {
            let base = params.get(&name).unwrap().to_f64_vec();
            let shape = params.get(&name).unwrap().shape().to_vec();
            let analytic = grads[&name].to_f64_vec();
            for i in (0..base.len()).step_by(base.len().max(1) / 3 + 1) {
                let h = 1e-6 * base[i].abs().max(1.0);
                let mut probe = |v: f64| {
                    let mut x = base.clone();
                    x[i] = v;
                    *params.get_mut(&name).unwrap() =
                        Tensor::from_f64(&shape, x).unwrap();
                    loss(&params)
                };
                let fd = (probe(base[i] + h) - probe(base[i] - h)) / (2.0 * h);
                probe(base[i]);
                assert!(
                    (fd - analytic[i]).abs() <= 1e-6 * fd.abs().max(1.0),
                    "{name}[{i}]: fd {fd} vs analytic {}",
                    analytic[i]
                );
            }
        }
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        let add = crate::ops::elementwise_binary(
            "add",
            crate::kernels::BinaryOp::Add,
            TensorType::f64(&[2]),
        );
        let mut g = InvocationGraph {
            ops: vec![add],
            nodes: vec![],
            results: vec![],
            result_trees: vec![],
        };
        g.nodes.push(GraphNode::Constant {
            value: Tensor::from_f64(&[2], vec![1.0, 2.0]).unwrap(),
            ttype: TensorType::f64(&[2]),
        });
        let c = ValueRef { node: 0, slot: 0 };
        g.nodes.push(GraphNode::Invocation { op: 0, inputs: vec![c, c] });
        let root = ValueRef { node: 1, slot: 0 };
        g.results.push(vec![root]);
        g.result_trees.push(ResultTree::Leaf(0));

        let params = ParameterStore::new();
        let s = Schedule::build(&mut g).unwrap();
        let run = run_forward(&g, &s, &params, Mode::Train).unwrap();
        assert_eq!(run.results[0][0].to_f64_vec(), vec![2.0, 4.0]);
        let grads = run_backward(
            &g,
            &s,
            &params,
            &run,
            &[vec![Some(Tensor::from_f64(&[2], vec![1.0, 1.0]).unwrap())]],
        )
        .unwrap();
        assert!(grads.is_empty());
    }
}
