//! Text classification pipeline: embed words, fold an RNN cell over them,
//! classify the final state.
//!
//! The input is a whitespace-separated string. Each word is looked up in a
//! fixed vocabulary; unknown words fall back to index 0 and share its
//! embedding row. A fold threads a single-layer RNN cell over the word
//! vectors from a zero initial state, so the empty string classifies the
//! zero state.

use std::collections::HashMap;
use std::sync::Arc;

use crate::blocks::Block;
use crate::host::HostValue;
use crate::ops::{self, Activation, OpHandle};
use crate::tensor::DType;
use crate::types::{BlockType, TensorType};

/// Dimensions and vocabulary for [`SentimentPipeline`].
pub struct PipelineConfig {
    pub vocab: Vec<String>,
    pub embed_dim: usize,
    pub state_dim: usize,
    pub n_classes: usize,
    pub dtype: DType,
}

impl PipelineConfig {
    pub fn new(vocab: &[&str]) -> PipelineConfig {
        PipelineConfig {
            vocab: vocab.iter().map(|w| w.to_string()).collect(),
            embed_dim: 8,
            state_dim: 16,
            n_classes: 5,
            dtype: DType::Float32,
        }
    }
}

/// Word-fold sentiment classifier.
pub struct SentimentPipeline {
    index: Arc<HashMap<String, i64>>,
    state_dim: usize,
    dtype: DType,
    pub embed: OpHandle,
    pub cell: OpHandle,
    pub head: OpHandle,
    pub loss_op: OpHandle,
}

impl SentimentPipeline {
    pub fn new(config: PipelineConfig) -> SentimentPipeline {
        let index: HashMap<String, i64> = config
            .vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as i64))
            .collect();
        let embed = ops::embedding("embed", config.vocab.len(), config.embed_dim, config.dtype);
        let cell = ops::fully_connected(
            "rnn_cell",
            &[config.state_dim, config.embed_dim],
            config.state_dim,
            Activation::Relu,
            config.dtype,
        );
        let head = ops::fully_connected(
            "sentiment",
            &[config.state_dim],
            config.n_classes,
            Activation::Linear,
            config.dtype,
        );
        let loss_op = ops::softmax_cross_entropy("sentiment_loss", config.n_classes, config.dtype);
        SentimentPipeline {
            index: Arc::new(index),
            state_dim: config.state_dim,
            dtype: config.dtype,
            embed,
            cell,
            head,
            loss_op,
        }
    }

    /// Every operation the pipeline's blocks invoke.
    pub fn ops(&self) -> Vec<OpHandle> {
        vec![self.embed.clone(), self.cell.clone(), self.head.clone(), self.loss_op.clone()]
    }

    /// One word (a string) to its embedding vector. Unknown words become a
    /// null index, which the optional layer turns into index 0.
    fn word2vec(&self) -> Block {
        let index = self.index.clone();
        let lookup = Block::input_transform("word_index", move |v| {
            let w = v.as_str()?;
            Ok(match index.get(w) {
                Some(&i) => HostValue::Int(i),
                None => HostValue::Null,
            })
        });
        lookup >> Block::optional(Block::scalar(DType::Int32)) >> Block::function(&self.embed)
    }

    /// Whole text (a string) to the folded state vector.
    fn text2vec(&self) -> Block {
        let split = Block::input_transform("split_words", |v| {
            let s = v.as_str()?;
            Ok(HostValue::List(s.split_whitespace().map(HostValue::str).collect()))
        });
        let state = TensorType::new(self.dtype, &[self.state_dim]);
        let init = Block::zeros(BlockType::Tensor(state));
        split >> Block::map(self.word2vec()) >> Block::fold(Block::function(&self.cell), init)
    }

    /// Text to class logits.
    pub fn logits(&self) -> Block {
        self.text2vec() >> Block::function(&self.head)
    }

    /// Labeled example `{"text": ..., "label": ...}` to a scalar loss.
    pub fn loss(&self) -> Block {
        Block::record(vec![("text", self.logits()), ("label", Block::scalar(DType::Int32))])
            >> Block::function(&self.loss_op)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compile::Compiler;
    use crate::models::init_params;
    use crate::ops::Mode;
    use crate::reference;
    use crate::tensor::Tensor;

    fn small() -> SentimentPipeline {
        let mut config = PipelineConfig::new(&["the", "cat", "sat"]);
        config.embed_dim = 4;
        config.state_dim = 3;
        config.n_classes = 5;
        SentimentPipeline::new(config)
    }

    #[test]
    fn empty_text_classifies_the_zero_state() {
        let model = small();
        let compiler = Compiler::new(model.logits()).unwrap();
        let mut params = init_params(&compiler.ops(), 7).unwrap();
        *params.get_mut("sentiment/b").unwrap() =
            Tensor::from_f32(&[5], vec![0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();

        let graph = compiler.trace(&HostValue::str("")).unwrap();
        let run = reference::run_forward(&graph, &params, Mode::Infer).unwrap();
        assert_eq!(run.stats.kernel_calls.get("embed"), None);
        assert_eq!(run.stats.kernel_calls.get("rnn_cell"), None);
        let logits = run.results[0][0].to_f64_vec();
        for (got, want) in logits.iter().zip([0.1, 0.2, 0.3, 0.4, 0.5]) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn unknown_words_share_the_first_embedding_row() {
        let model = small();
        let compiler = Compiler::new(model.logits()).unwrap();
        let params = init_params(&compiler.ops(), 7).unwrap();

        let known = compiler.trace(&HostValue::str("the")).unwrap();
        let unknown = compiler.trace(&HostValue::str("xyzzy")).unwrap();
        let a = reference::run_forward(&known, &params, Mode::Infer).unwrap();
        let b = reference::run_forward(&unknown, &params, Mode::Infer).unwrap();
        assert_eq!(a.results[0][0].to_f64_vec(), b.results[0][0].to_f64_vec());
    }

    #[test]
    fn each_word_costs_one_embedding_and_one_cell_step() {
        let model = small();
        let compiler = Compiler::new(model.logits()).unwrap();
        let params = init_params(&compiler.ops(), 7).unwrap();

        let graph = compiler.trace(&HostValue::str("the cat")).unwrap();
        let run = reference::run_forward(&graph, &params, Mode::Infer).unwrap();
        assert_eq!(run.stats.kernel_calls.get("embed"), Some(&2));
        assert_eq!(run.stats.kernel_calls.get("rnn_cell"), Some(&2));
        assert_eq!(run.stats.kernel_calls.get("sentiment"), Some(&1));
    }

    #[test]
    fn loss_is_cross_entropy_of_the_logits() {
        let model = small();
        let logits_c = Compiler::new(model.logits()).unwrap();
        let loss_c = Compiler::new(model.loss()).unwrap();
        let params = init_params(&loss_c.ops(), 7).unwrap();

        let text = "cat sat the";
        let label = 2usize;
        let lg = logits_c.trace(&HostValue::str(text)).unwrap();
        let logits = reference::run_forward(&lg, &params, Mode::Infer).unwrap().results[0][0]
            .to_f64_vec();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let want = lse - logits[label];

        let example = HostValue::map(vec![
            ("text", HostValue::str(text)),
            ("label", HostValue::Int(label as i64)),
        ]);
        let graph = loss_c.trace(&example).unwrap();
        let run = reference::run_forward(&graph, &params, Mode::Infer).unwrap();
        let got = run.results[0][0].to_f64_vec()[0];
        assert!((got - want).abs() < 1e-5, "{got} vs {want}");
    }
}
