//! Unbatched evaluation: runs an invocation graph one node at a time.
//!
//! Every kernel is called with batch size 1, exactly as a hand-written
//! recursive evaluator would, so this is both the correctness oracle for
//! the batched executor and the baseline that shows what dynamic batching
//! saves. Expects a freshly traced graph, whose node ids are in dependency
//! order; the scheduler's pass-through nodes are neither needed nor
//! expected here.

use crate::error::{Error, Result};
use crate::graph::{GraphNode, InvocationGraph};
use crate::kernels;
use crate::ops::Mode;
use crate::runtime::exec::{ParamGrads, RunStats};
use crate::runtime::params::ParameterStore;
use crate::tensor::Tensor;

/// A finished unbatched forward pass.
pub struct ReferenceRun {
    mode: Mode,
    /// Per node, per output slot, the value shaped `[1, ...item]`.
    values: Vec<Vec<Tensor>>,
    saved: Vec<Vec<Tensor>>,
    /// Per traced input, its result values, item-shaped.
    pub results: Vec<Vec<Tensor>>,
    pub stats: RunStats,
}

pub fn run_forward(
    graph: &InvocationGraph,
    params: &ParameterStore,
    mode: Mode,
) -> Result<ReferenceRun> {
    let mut values: Vec<Vec<Tensor>> = Vec::with_capacity(graph.nodes.len());
    let mut saved: Vec<Vec<Tensor>> = Vec::with_capacity(graph.nodes.len());
    let mut stats = RunStats::default();

    for (i, node) in graph.nodes.iter().enumerate() {
        let (outs, keep) = match node {
            GraphNode::Constant { value, ttype } => {
                (vec![value.clone().reshape(&ttype.batched_shape(1))?], Vec::new())
            }
            GraphNode::Invocation { op, inputs } => {
                let operation = &graph.ops[*op];
                let xs: Vec<Tensor> = inputs
                    .iter()
                    .map(|r| {
                        if r.node >= i {
                            return Err(Error::Schedule(format!(
                                "node {i} reads node {} before it is computed",
                                r.node
                            )));
                        }
                        Ok(values[r.node][r.slot].clone())
                    })
                    .collect::<Result<_>>()?;
                let out = operation
                    .kernel
                    .forward(&xs, params, mode)
                    .map_err(|e| e.in_op(&operation.name, 0))?;
                *stats.kernel_calls.entry(operation.name.clone()).or_insert(0) += 1;
                *stats.kernel_rows.entry(operation.name.clone()).or_insert(0) += 1;
                (out.outputs, out.saved)
            }
            GraphNode::PassThrough { input, .. } => {
                stats.pass_calls += 1;
                stats.pass_rows += 1;
                (vec![values[input.node][input.slot].clone()], Vec::new())
            }
        };
        values.push(outs);
        saved.push(keep);
    }

    let mut results = Vec::with_capacity(graph.results.len());
    for refs in &graph.results {
        let mut out = Vec::with_capacity(refs.len());
        for r in refs {
            let v = &values[r.node][r.slot];
            let item: Vec<usize> = v.shape()[1..].to_vec();
            out.push(v.clone().reshape(&item)?);
        }
        results.push(out);
    }

    let (values, saved) = if mode == Mode::Train {
        (values, saved)
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(ReferenceRun { mode, values, saved, results, stats })
}

/// Backward sweep of an unbatched forward. `result_grads` mirrors
/// [`ReferenceRun::results`], item-shaped, `None` where no gradient flows.
pub fn run_backward(
    graph: &InvocationGraph,
    params: &ParameterStore,
    run: &ReferenceRun,
    result_grads: &[Vec<Option<Tensor>>],
) -> Result<ParamGrads> {
    if run.mode != Mode::Train {
        return Err(Error::Config(
            "backward needs a forward pass run in training mode".into(),
        ));
    }
    if result_grads.len() != graph.results.len() {
        return Err(Error::Config(format!(
            "got gradients for {} inputs, graph has {}",
            result_grads.len(),
            graph.results.len()
        )));
    }

    let mut dvals: Vec<Vec<Option<Tensor>>> = run
        .values
        .iter()
        .map(|outs| vec![None; outs.len()])
        .collect();
    let bump = |dvals: &mut Vec<Vec<Option<Tensor>>>,
                    node: usize,
                    slot: usize,
                    g: &Tensor|
     -> Result<()> {
        match &mut dvals[node][slot] {
            Some(acc) => kernels::add_into(acc, g),
            empty => {
                *empty = Some(g.clone());
                Ok(())
            }
        }
    };

    for (gi, grads) in result_grads.iter().enumerate() {
        if grads.len() != graph.results[gi].len() {
            return Err(Error::Config(format!(
                "input {gi} has {} result gradients, expected {}",
                grads.len(),
                graph.results[gi].len()
            )));
        }
        for (g, r) in grads.iter().zip(&graph.results[gi]) {
            let Some(g) = g else { continue };
            let mut shape = vec![1];
            shape.extend_from_slice(g.shape());
            bump(&mut dvals, r.node, r.slot, &g.clone().reshape(&shape)?)?;
        }
    }

    let mut param_grads: ParamGrads = ParamGrads::new();
    for i in (0..graph.nodes.len()).rev() {
        if dvals[i].iter().all(Option::is_none) {
            continue;
        }
        match &graph.nodes[i] {
            GraphNode::Constant { .. } => {}
            GraphNode::PassThrough { input, .. } => {
                let g = dvals[i][0].take().expect("checked above");
                bump(&mut dvals, input.node, input.slot, &g)?;
            }
            GraphNode::Invocation { op, inputs } => {
                let operation = &graph.ops[*op];
                let dys: Vec<Tensor> = run.values[i]
                    .iter()
                    .enumerate()
                    .map(|(slot, y)| match &dvals[i][slot] {
                        Some(g) => g.clone(),
                        None => Tensor::zeros(y.dtype(), y.shape()),
                    })
                    .collect();
                let xs: Vec<Tensor> = inputs
                    .iter()
                    .map(|r| run.values[r.node][r.slot].clone())
                    .collect();
                let grads = operation
                    .kernel
                    .backward(&xs, &run.saved[i], &run.values[i], &dys, params)
                    .map_err(|e| e.in_op(&operation.name, 0))?;
                for (slot, dx) in grads.input_grads.into_iter().enumerate() {
                    let Some(dx) = dx else { continue };
                    bump(&mut dvals, inputs[slot].node, inputs[slot].slot, &dx)?;
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
    Ok(param_grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{ResultTree, ValueRef};
    use crate::ops::{embedding, fully_connected, Activation};
    use crate::schedule::Schedule;
    use crate::tensor::DType;
    use crate::testutil::seeded_rng;
    use crate::types::TensorType;

    fn chain_graph(depth: usize) -> InvocationGraph {
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
        let mut acc = word(&mut g, 1);
        for w in 0..depth as i32 {
            let e = word(&mut g, w % 10);
            g.nodes.push(GraphNode::Invocation { op: 1, inputs: vec![acc, e] });
            acc = ValueRef { node: g.nodes.len() - 1, slot: 0 };
        }
        g.results.push(vec![acc]);
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

    #[test]
    fn counts_one_kernel_call_per_invocation() {
        let g = chain_graph(4);
        let params = init_params(&g, 5);
        let run = run_forward(&g, &params, Mode::Infer).unwrap();
        assert_eq!(run.stats.kernel_calls["embed"], 5);
        assert_eq!(run.stats.kernel_calls["cell"], 4);
        assert_eq!(run.stats.pass_calls, 0);
    }

    #[test]
    fn matches_the_batched_executor() {
        let g = chain_graph(5);
        let params = init_params(&g, 8);
        let want = run_forward(&g, &params, Mode::Infer).unwrap();

        let mut batched = chain_graph(5);
        let s = Schedule::build(&mut batched).unwrap();
        let got =
            crate::runtime::exec::run_forward(&batched, &s, &params, Mode::Infer).unwrap();

        let a = want.results[0][0].to_f64_vec();
        let b = got.results[0][0].to_f64_vec();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn gradients_match_the_batched_executor() {
        let g = chain_graph(3);
        let params = init_params(&g, 13);
        let run = run_forward(&g, &params, Mode::Train).unwrap();
        let seed = Tensor::from_f64(&[3], vec![0.3, -1.0, 2.0]).unwrap();
        let grads =
            run_backward(&g, &params, &run, &[vec![Some(seed.clone())]]).unwrap();

        let mut batched = chain_graph(3);
        let s = Schedule::build(&mut batched).unwrap();
        let brun =
            crate::runtime::exec::run_forward(&batched, &s, &params, Mode::Train).unwrap();
        let bgrads =
            crate::runtime::exec::run_backward(&batched, &s, &params, &brun, &[vec![Some(seed)]])
                .unwrap();

        assert_eq!(grads.len(), bgrads.len());
        for (name, g) in &grads {
            let b = &bgrads[name];
            let (gv, bv) = (g.to_f64_vec(), b.to_f64_vec());
            for (x, y) in gv.iter().zip(&bv) {
                assert!((x - y).abs() < 1e-10, "{name}: {x} vs {y}");
            }
        }
    }
}
