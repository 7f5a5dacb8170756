//! Binary Tree-LSTM over recursively structured inputs.
//!
//! Trees arrive as host maps: a leaf is `{"word": w}` and an internal node
//! is `{"left": ..., "right": ...}`; either may carry an integer `"label"`.
//! A forward declaration lets the tree expression refer to itself, and a
//! keyed dispatch picks the leaf or internal wiring per node. Both cases
//! produce the same five-slot bundle (input vector, then each child's
//! hidden and memory states), which feeds one shared LSTM cell:
//! leaves embed their word and use zero child states, internal nodes
//! recurse into both children and use a zero input vector.
//!
//! The loss either scores the root state against one label or, in
//! per-node mode, sums a softmax cross-entropy at every node.

use std::collections::HashMap;
use std::sync::Arc;

use crate::blocks::{Block, Composition, ForwardDecl, Wire};
use crate::error::{Error, Result};
use crate::host::{CaseKey, HostValue};
use crate::ops::{self, Activation, OpHandle};
use crate::tensor::DType;
use crate::types::{BlockType, TensorType};

/// Which nodes contribute to the training loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Cross-entropy at the root, against a label supplied beside the tree.
    RootOnly,
    /// Cross-entropy at every node, against per-node `"label"` fields,
    /// summed over the tree.
    AllNodes,
}

/// Dimensions, vocabulary and loss layout for [`TreeLstm`].
pub struct TreeLstmConfig {
    pub vocab: Vec<String>,
    pub embed_dim: usize,
    pub state_dim: usize,
    pub n_classes: usize,
    pub loss_mode: LossMode,
    pub dtype: DType,
}

impl TreeLstmConfig {
    pub fn new(vocab: &[&str]) -> TreeLstmConfig {
        TreeLstmConfig {
            vocab: vocab.iter().map(|w| w.to_string()).collect(),
            embed_dim: 16,
            state_dim: 32,
            n_classes: 5,
            loss_mode: LossMode::RootOnly,
            dtype: DType::Float32,
        }
    }
}

/// Recursive binary Tree-LSTM with a linear classification head.
pub struct TreeLstm {
    loss_mode: LossMode,
    pub embed: OpHandle,
    pub cell: OpHandle,
    pub head: OpHandle,
    pub loss_op: OpHandle,
    decl: ForwardDecl,
}

impl TreeLstm {
    pub fn new(config: TreeLstmConfig) -> Result<TreeLstm> {
        let index: Arc<HashMap<String, i64>> = Arc::new(
            config
                .vocab
                .iter()
                .enumerate()
                .map(|(i, w)| (w.clone(), i as i64))
                .collect(),
        );
        let embed = ops::embedding("embed", config.vocab.len(), config.embed_dim, config.dtype);
        let cell =
            ops::tree_lstm_cell("tree_cell", Some(config.embed_dim), config.state_dim, config.dtype);
        let head = ops::fully_connected(
            "tree_head",
            &[config.state_dim],
            config.n_classes,
            Activation::Linear,
            config.dtype,
        );
        let loss_op = ops::softmax_cross_entropy("tree_loss", config.n_classes, config.dtype);
        let decl = ForwardDecl::new("expr");

        let embed_t = TensorType::new(config.dtype, &[config.embed_dim]);
        let state_t = TensorType::new(config.dtype, &[config.state_dim]);
        let scalar_t = TensorType::new(config.dtype, &[]);

        let word_path = || {
            let index = index.clone();
            Block::input_transform("word_index", move |v| {
                let w = v.field("word")?.as_str()?;
                Ok(match index.get(w) {
                    Some(&i) => HostValue::Int(i),
                    None => HostValue::Null,
                })
            }) >> Block::optional(Block::scalar(DType::Int32))
                >> Block::function(&embed)
        };
        let child = |side: &'static str| {
            Block::input_transform(side, move |v| v.field(side).cloned()) >> decl.reference()
        };
        let zeros = |t: &TensorType| Block::zeros(BlockType::Tensor(t.clone()));

        // Both cases produce the cell's input bundle (x, h_l, c_l, h_r, c_r),
        // leaves with an extra zero in per-node mode for "loss so far".
        let word_case = |with_loss: bool| {
            let mut children = vec![
                word_path(),
                zeros(&state_t),
                zeros(&state_t),
                zeros(&state_t),
                zeros(&state_t),
            ];
            if with_loss {
                children.push(zeros(&scalar_t));
            }
            Block::all_of(children)
        };
        let pair_case = |with_loss: bool| -> Result<Block> {
            let mut comp = Composition::new();
            let n_l = comp.add(child("left"), &[Wire::input()]);
            let n_r = comp.add(child("right"), &[Wire::input()]);
            let n_x = comp.add_unwired(zeros(&embed_t));
            let mut out =
                vec![n_x.wire(), n_l.field(0), n_l.field(1), n_r.field(0), n_r.field(1)];
            if with_loss {
                let n_closs = comp.add(Block::sum(), &[n_l.field(2), n_r.field(2)]);
                out.push(n_closs.wire());
            }
            comp.set_output(&out);
            comp.into_block()
        };
        let dispatch = |with_loss: bool| -> Result<Block> {
            Ok(Block::one_of(
                "child_count",
                |v| match v {
                    HostValue::Map(fields) => Ok(CaseKey::Int(
                        fields.iter().filter(|(k, _)| k.as_str() != "label").count() as i64,
                    )),
                    other => Err(Error::Input(format!(
                        "tree nodes should be maps, found {}",
                        other.kind()
                    ))),
                },
                vec![
                    (CaseKey::Int(1), word_case(with_loss)),
                    (CaseKey::Int(2), pair_case(with_loss)?),
                ],
            ))
        };

        match config.loss_mode {
            // Node map to (h, c).
            LossMode::RootOnly => {
                decl.resolve_to(dispatch(false)? >> Block::function(&cell))?;
            }
            // Node map to (h, c, loss accumulated over the subtree).
            LossMode::AllNodes => {
                let mut comp = Composition::new();
                let n_case = comp.add(dispatch(true)?, &[Wire::input()]);
                let n_cell = comp.add(
                    Block::function(&cell),
                    &[
                        n_case.field(0),
                        n_case.field(1),
                        n_case.field(2),
                        n_case.field(3),
                        n_case.field(4),
                    ],
                );
                let n_logits = comp.add(Block::function(&head), &[n_cell.field(0)]);
                let n_label = comp.add(
                    Block::input_transform("label", |v| v.field("label").cloned())
                        >> Block::scalar(DType::Int32),
                    &[Wire::input()],
                );
                let n_loss = comp.add(Block::function(&loss_op), &[n_logits.wire(), n_label.wire()]);
                let n_total = comp.add(Block::sum(), &[n_loss.wire(), n_case.field(5)]);
                comp.set_output(&[n_cell.field(0), n_cell.field(1), n_total.wire()]);
                decl.resolve_to(comp.into_block()?)?;
            }
        }

        Ok(TreeLstm { loss_mode: config.loss_mode, embed, cell, head, loss_op, decl })
    }

    /// Every operation the tree blocks invoke.
    pub fn ops(&self) -> Vec<OpHandle> {
        vec![self.embed.clone(), self.cell.clone(), self.head.clone(), self.loss_op.clone()]
    }

    pub fn loss_mode(&self) -> LossMode {
        self.loss_mode
    }

    /// Node map to the root cell outputs: (h, c), plus the accumulated
    /// loss in per-node mode.
    pub fn expr(&self) -> Block {
        self.decl.reference()
    }

    /// Node map to class logits at the root.
    pub fn logits(&self) -> Result<Block> {
        let mut comp = Composition::new();
        let n_e = comp.add(self.decl.reference(), &[Wire::input()]);
        let n_h = comp.add(Block::function(&self.head), &[n_e.field(0)]);
        comp.set_output(&[n_h.wire()]);
        comp.into_block()
    }

    /// Training loss. Root-only mode consumes `{"tree": ..., "label": ...}`;
    /// per-node mode consumes a tree whose nodes all carry labels.
    pub fn loss(&self) -> Result<Block> {
        match self.loss_mode {
            LossMode::RootOnly => Ok(Block::record(vec![
                ("tree", self.logits()?),
                ("label", Block::scalar(DType::Int32)),
            ]) >> Block::function(&self.loss_op)),
            LossMode::AllNodes => {
                let mut comp = Composition::new();
                let n_e = comp.add(self.decl.reference(), &[Wire::input()]);
                comp.set_output(&[n_e.field(2)]);
                comp.into_block()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compile::Compiler;
    use crate::models::init_params;
    use crate::ops::Mode;
    use crate::reference;
    use crate::runtime::exec;
    use crate::runtime::params::ParameterStore;
    use crate::schedule::Schedule;
    use crate::tensor::Tensor;

    fn leaf(w: &str) -> HostValue {
        HostValue::map(vec![("word", HostValue::str(w))])
    }

    fn pair(l: HostValue, r: HostValue) -> HostValue {
        HostValue::map(vec![("left", l), ("right", r)])
    }

    fn small(loss_mode: LossMode) -> TreeLstm {
        let mut config = TreeLstmConfig::new(&["a", "b", "c", "d"]);
        config.embed_dim = 3;
        config.state_dim = 4;
        config.n_classes = 3;
        config.loss_mode = loss_mode;
        TreeLstm::new(config).unwrap()
    }

    fn zero_cell(params: &mut ParameterStore) {
        for name in ["tree_cell/wx", "tree_cell/wl", "tree_cell/wr", "tree_cell/b"] {
            let t = params.get(name).unwrap();
            let zero = Tensor::zeros(t.dtype(), t.shape());
            *params.get_mut(name).unwrap() = zero;
        }
    }

    #[test]
    fn zeroed_cells_give_zero_states_at_every_node() {
        let model = small(LossMode::RootOnly);
        let compiler = Compiler::new(model.expr()).unwrap();
        let mut params = init_params(&compiler.ops(), 13).unwrap();
        zero_cell(&mut params);

        let tree = pair(leaf("a"), pair(leaf("b"), leaf("c")));
        let graph = compiler.trace(&tree).unwrap();
        let run = reference::run_forward(&graph, &params, Mode::Infer).unwrap();
        assert_eq!(run.stats.kernel_calls.get("embed"), Some(&3));
        assert_eq!(run.stats.kernel_calls.get("tree_cell"), Some(&5));
        for value in &run.results[0] {
            assert!(value.to_f64_vec().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn hidden_states_stay_inside_the_unit_box() {
        let model = small(LossMode::RootOnly);
        let compiler = Compiler::new(model.expr()).unwrap();
        let params = init_params(&compiler.ops(), 29).unwrap();

        let tree = pair(pair(leaf("a"), leaf("d")), pair(leaf("b"), pair(leaf("c"), leaf("zz"))));
        let graph = compiler.trace(&tree).unwrap();
        let run = reference::run_forward(&graph, &params, Mode::Infer).unwrap();
        let h = run.results[0][0].to_f64_vec();
        assert!(h.iter().all(|v| v.abs() <= 1.0), "|h| escaped the unit box: {h:?}");
    }

    #[test]
    fn complete_trees_batch_one_cell_call_per_level() {
        let model = small(LossMode::RootOnly);
        let compiler = Compiler::new(model.expr()).unwrap();
        let params = init_params(&compiler.ops(), 13).unwrap();

        let tree = pair(pair(leaf("a"), leaf("b")), pair(leaf("c"), leaf("d")));
        let mut graph = compiler.trace(&tree).unwrap();
        let reference_run = reference::run_forward(&graph, &params, Mode::Infer).unwrap();
        let schedule = Schedule::build(&mut graph).unwrap();
        let calls = schedule.calls_per_op(&graph);
        assert_eq!(calls.get("embed"), Some(&1));
        assert_eq!(calls.get("tree_cell"), Some(&3));

        let run = exec::run_forward(&graph, &schedule, &params, Mode::Infer).unwrap();
        for (batched, one_at_a_time) in run.results[0].iter().zip(&reference_run.results[0]) {
            let a = batched.to_f64_vec();
            let b = one_at_a_time.to_f64_vec();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn root_loss_is_cross_entropy_of_the_root_logits() {
        let model = small(LossMode::RootOnly);
        let logits_c = Compiler::new(model.logits().unwrap()).unwrap();
        let loss_c = Compiler::new(model.loss().unwrap()).unwrap();
        let params = init_params(&loss_c.ops(), 37).unwrap();

        let tree = pair(leaf("b"), leaf("c"));
        let label = 1usize;
        let lg = logits_c.trace(&tree).unwrap();
        let logits =
            reference::run_forward(&lg, &params, Mode::Infer).unwrap().results[0][0].to_f64_vec();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let want = lse - logits[label];

        let example =
            HostValue::map(vec![("tree", tree), ("label", HostValue::Int(label as i64))]);
        let graph = loss_c.trace(&example).unwrap();
        let got = reference::run_forward(&graph, &params, Mode::Infer).unwrap().results[0][0]
            .to_f64_vec()[0];
        assert!((got - want).abs() < 1e-5, "{got} vs {want}");
    }

    #[test]
    fn per_node_loss_sums_cross_entropy_over_all_nodes() {
        let model = small(LossMode::AllNodes);
        let logits_c = Compiler::new(model.logits().unwrap()).unwrap();
        let loss_c = Compiler::new(model.loss().unwrap()).unwrap();
        let params = init_params(&loss_c.ops(), 41).unwrap();

        let la = HostValue::map(vec![("word", HostValue::str("a")), ("label", HostValue::Int(0))]);
        let lb = HostValue::map(vec![("word", HostValue::str("d")), ("label", HostValue::Int(2))]);
        let root = HostValue::map(vec![
            ("left", la.clone()),
            ("right", lb.clone()),
            ("label", HostValue::Int(1)),
        ]);

        let ce_at = |node: &HostValue, label: usize| -> f64 {
            let graph = logits_c.trace(node).unwrap();
            let logits = reference::run_forward(&graph, &params, Mode::Infer).unwrap().results[0]
                [0]
            .to_f64_vec();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - logits[label]
        };
        let want = ce_at(&la, 0) + ce_at(&lb, 2) + ce_at(&root, 1);

        let graph = loss_c.trace(&root).unwrap();
        let got = reference::run_forward(&graph, &params, Mode::Infer).unwrap().results[0][0]
            .to_f64_vec()[0];
        assert!((got - want).abs() < 1e-5, "{got} vs {want}");
    }
}
