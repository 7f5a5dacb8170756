//! Feed-forward attention over a sequence of vectors.
//!
//! A learned scoring function assigns each step a scalar energy; the
//! softmax of the energies weights the steps, and the output is the
//! weighted sum. The wiring is a single composition: map the scorer and
//! an exponential over the input, divide by the broadcast total to get
//! the weights, then scale each step by its weight and sum.

use crate::blocks::{Block, Composition, NodeRef, Wire};
use crate::error::Result;
use crate::kernels::{BinaryOp, UnaryOp};
use crate::ops::{self, Activation, OpHandle};
use crate::tensor::DType;
use crate::types::TensorType;

/// Dimensions for [`Attention`].
pub struct AttentionConfig {
    pub dim: usize,
    pub dtype: DType,
}

/// Softmax-weighted sum of a sequence, with a learned scorer.
pub struct Attention {
    pub score: OpHandle,
    exp_op: OpHandle,
    div_op: OpHandle,
    tile_op: OpHandle,
    mul_op: OpHandle,
}

impl Attention {
    pub fn new(config: AttentionConfig) -> Attention {
        let one = TensorType::new(config.dtype, &[1]);
        let vec = TensorType::new(config.dtype, &[config.dim]);
        Attention {
            score: ops::fully_connected(
                "attn_score",
                &[config.dim],
                1,
                Activation::Linear,
                config.dtype,
            ),
            exp_op: ops::elementwise_unary("attn_exp", UnaryOp::Exp, one.clone()),
            div_op: ops::elementwise_binary("attn_div", BinaryOp::Div, one),
            tile_op: ops::tile_feature("attn_tile", config.dim, config.dtype),
            mul_op: ops::elementwise_binary("attn_mul", BinaryOp::Mul, vec),
        }
    }

    /// Every operation the attention blocks invoke.
    pub fn ops(&self) -> Vec<OpHandle> {
        vec![
            self.score.clone(),
            self.exp_op.clone(),
            self.div_op.clone(),
            self.tile_op.clone(),
            self.mul_op.clone(),
        ]
    }

    /// Builds the shared front half: exponentiated scores and normalized
    /// weights over the composition input.
    fn core(&self) -> (Composition, NodeRef) {
        let mut comp = Composition::new();
        let exp_e = comp.add(
            Block::map(Block::function(&self.score) >> Block::function(&self.exp_op)),
            &[Wire::input()],
        );
        let z = comp.add(Block::sum() >> Block::broadcast(), &[exp_e.wire()]);
        let alpha =
            comp.add(Block::zip_with(Block::function(&self.div_op)), &[exp_e.wire(), z.wire()]);
        (comp, alpha)
    }

    /// Multiplies one step's vector by its scalar weight.
    fn scale(&self) -> Result<Block> {
        let mut comp = Composition::new();
        let t = comp.add(Block::function(&self.tile_op), &[Wire::input_field(0)]);
        let m = comp.add(Block::function(&self.mul_op), &[t.wire(), Wire::input_field(1)]);
        comp.set_output(&[m.wire()]);
        comp.into_block()
    }

    /// Sequence of vectors to their attention-weighted sum.
    pub fn block(&self) -> Result<Block> {
        let (mut comp, alpha) = self.core();
        let c = comp.add(
            Block::zip_with(self.scale()?) >> Block::sum(),
            &[alpha.wire(), Wire::input()],
        );
        comp.set_output(&[c.wire()]);
        comp.into_block()
    }

    /// Sequence of vectors to the per-step attention weights.
    pub fn weights(&self) -> Result<Block> {
        let (mut comp, alpha) = self.core();
        comp.set_output(&[alpha.wire()]);
        comp.into_block()
    }
}
