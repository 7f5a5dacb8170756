//! Batched operations: the unit of work the scheduler groups and batches.
//!
//! An [`Operation`] is a named function from a fixed list of input tensor
//! types to a fixed list of output tensor types, with trainable parameters
//! declared up front. The same kernel runs whether one invocation or a
//! thousand are batched together; inputs just grow along the leading batch
//! axis. Built-in constructors cover embedding lookup, multi-input fully
//! connected layers, binary tree LSTM cells, elementwise arithmetic,
//! feature-axis concat, column tiling, and softmax cross-entropy. Custom
//! operations implement [`Kernel`] and go through [`Operation::new`].

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, BinaryOp, UnaryOp};
use crate::runtime::params::{Init, ParamSpec, ParameterStore};
use crate::tensor::{DType, Tensor};
use crate::types::TensorType;

/// Whether a run needs to retain state for a later backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Infer,
    Train,
}

/// Result of a kernel forward pass. `saved` holds whatever the backward
/// pass needs beyond inputs and outputs; it stays empty in inference mode.
pub struct KernelOutput {
    pub outputs: Vec<Tensor>,
    pub saved: Vec<Tensor>,
}

impl KernelOutput {
    pub fn outputs(outputs: Vec<Tensor>) -> KernelOutput {
        KernelOutput { outputs, saved: Vec::new() }
    }
}

/// Result of a kernel backward pass. `input_grads` aligns with the input
/// slots; `None` marks non-differentiable inputs (integer tensors).
pub struct KernelGrads {
    pub input_grads: Vec<Option<Tensor>>,
    pub param_grads: Vec<(String, Tensor)>,
}

/// The batched compute behind an operation.
///
/// Forward receives one tensor per input slot, shaped `[b, ...item]` for a
/// batch of `b` invocations. Backward receives the forward inputs, the
/// saved tensors, the forward outputs, and one gradient per output slot
/// (zeros for outputs nothing consumed), and returns gradients per input
/// slot and per parameter.
pub trait Kernel: Send + Sync {
    fn forward(
        &self,
        inputs: &[Tensor],
        params: &ParameterStore,
        mode: Mode,
    ) -> Result<KernelOutput>;

    fn backward(
        &self,
        inputs: &[Tensor],
        saved: &[Tensor],
        outputs: &[Tensor],
        out_grads: &[Tensor],
        params: &ParameterStore,
    ) -> Result<KernelGrads>;
}

/// A named, typed, batchable operation.
pub struct Operation {
    pub name: String,
    pub inputs: Vec<TensorType>,
    pub outputs: Vec<TensorType>,
    pub params: Vec<ParamSpec>,
    pub kernel: Box<dyn Kernel>,
}

pub type OpHandle = Arc<Operation>;

impl Operation {
    pub fn new(
        name: &str,
        inputs: Vec<TensorType>,
        outputs: Vec<TensorType>,
        params: Vec<ParamSpec>,
        kernel: Box<dyn Kernel>,
    ) -> OpHandle {
        Arc::new(Operation { name: name.to_string(), inputs, outputs, params, kernel })
    }
}

impl fmt::Debug for Operation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.name)?;
        for (i, t) in self.inputs.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{t}")?;
        }
        write!(f, ") -> (")?;
        for (i, t) in self.outputs.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{t}")?;
        }
        write!(f, ")")
    }
}

/// Activation applied after a linear layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(self, pre: Tensor) -> Result<Tensor> {
        match self {
            Activation::Linear => Ok(pre),
            Activation::Relu => kernels::ew_unary(UnaryOp::Relu, &pre),
            Activation::Tanh => kernels::ew_unary(UnaryOp::Tanh, &pre),
            Activation::Sigmoid => kernels::ew_unary(UnaryOp::Sigmoid, &pre),
        }
    }

    /// Gradient of the pre-activation given the activation output. All
    /// four activations here are recoverable from the output alone (for
    /// relu the output sign carries the mask).
    fn grad_from_output(self, y: &Tensor, dy: &Tensor) -> Result<Tensor> {
        match self {
            Activation::Linear => Ok(dy.clone()),
            Activation::Relu => kernels::ew_unary_grad(UnaryOp::Relu, y, y, dy),
            Activation::Tanh => kernels::ew_unary_grad(UnaryOp::Tanh, y, y, dy),
            Activation::Sigmoid => kernels::ew_unary_grad(UnaryOp::Sigmoid, y, y, dy),
        }
    }
}

fn batch_rows(t: &Tensor) -> usize {
    t.shape().first().copied().unwrap_or(0)
}

// ---------------------------------------------------------------------------
// Embedding lookup
// ---------------------------------------------------------------------------

struct EmbeddingKernel {
    table: String,
    vocab: usize,
}

impl EmbeddingKernel {
    fn indices(&self, ids: &Tensor) -> Result<Vec<usize>> {
        let vals = ids.as_i32()?;
        let mut idx = Vec::with_capacity(vals.len());
        for &v in vals {
            if v < 0 || v as usize >= self.vocab {
                return Err(Error::Tensor(format!(
                    "embedding id {v} out of range for vocabulary of {}",
                    self.vocab
                )));
            }
            idx.push(v as usize);
        }
        Ok(idx)
    }
}

impl Kernel for EmbeddingKernel {
    fn forward(&self, inputs: &[Tensor], params: &ParameterStore, _mode: Mode) -> Result<KernelOutput> {
        let table = params.get(&self.table)?;
        let idx = self.indices(&inputs[0])?;
        Ok(KernelOutput::outputs(vec![kernels::gather_rows(table, &idx)?]))
    }

    fn backward(
        &self,
        inputs: &[Tensor],
        _saved: &[Tensor],
        _outputs: &[Tensor],
        out_grads: &[Tensor],
        _params: &ParameterStore,
    ) -> Result<KernelGrads> {
        let idx = self.indices(&inputs[0])?;
        let grad = kernels::scatter_add_rows(&out_grads[0], &idx, self.vocab)?;
        Ok(KernelGrads {
            input_grads: vec![None],
            param_grads: vec![(self.table.clone(), grad)],
        })
    }
}

/// Embedding lookup: `i32[]` ids to rows of a `[vocab, dim]` table
/// parameter named `{name}/table`.
pub fn embedding(name: &str, vocab: usize, dim: usize, dtype: DType) -> OpHandle {
    let table = format!("{name}/table");
    Operation::new(
        name,
        vec![TensorType::i32(&[])],
        vec![TensorType::new(dtype, &[dim])],
        vec![ParamSpec::new(
            table.clone(),
            dtype,
            &[vocab, dim],
            Init::Glorot { fan_in: vocab, fan_out: dim },
        )],
        Box::new(EmbeddingKernel { table, vocab }),
    )
}

// ---------------------------------------------------------------------------
// Fully connected layer over one or more inputs
// ---------------------------------------------------------------------------

struct FullyConnectedKernel {
    name: String,
    n_inputs: usize,
    activation: Activation,
}

impl FullyConnectedKernel {
    fn weight_name(&self, i: usize) -> String {
        format!("{}/w{i}", self.name)
    }

    fn bias_name(&self) -> String {
        format!("{}/b", self.name)
    }
}

impl Kernel for FullyConnectedKernel {
    fn forward(&self, inputs: &[Tensor], params: &ParameterStore, _mode: Mode) -> Result<KernelOutput> {
        let n = batch_rows(&inputs[0]);
        let mut pre = kernels::bias_rows(params.get(&self.bias_name())?, n)?;
        for (i, x) in inputs.iter().enumerate() {
            kernels::matmul_acc(x, params.get(&self.weight_name(i))?, &mut pre)?;
        }
        Ok(KernelOutput::outputs(vec![self.activation.apply(pre)?]))
    }

    fn backward(
        &self,
        inputs: &[Tensor],
        _saved: &[Tensor],
        outputs: &[Tensor],
        out_grads: &[Tensor],
        params: &ParameterStore,
    ) -> Result<KernelGrads> {
        let dpre = self.activation.grad_from_output(&outputs[0], &out_grads[0])?;
        let mut input_grads = Vec::with_capacity(self.n_inputs);
        let mut param_grads = Vec::with_capacity(self.n_inputs + 1);
        for (i, x) in inputs.iter().enumerate() {
            let w = params.get(&self.weight_name(i))?;
            input_grads.push(Some(kernels::matmul_grad_lhs(&dpre, w)?));
            param_grads.push((self.weight_name(i), kernels::matmul_grad_rhs(x, &dpre)?));
        }
        param_grads.push((self.bias_name(), kernels::reduce_sum(&dpre, 0)?));
        Ok(KernelGrads { input_grads, param_grads })
    }
}

/// Fully connected layer `y = act(sum_i x_i W_i + b)` over one or more
/// vector inputs. Parameters: `{name}/w{i}` of shape `[in_dims[i], out_dim]`
/// and `{name}/b` of shape `[out_dim]`.
pub fn fully_connected(
    name: &str,
    in_dims: &[usize],
    out_dim: usize,
    activation: Activation,
    dtype: DType,
) -> OpHandle {
    assert!(!in_dims.is_empty(), "fully_connected needs at least one input");
    let fan_in: usize = in_dims.iter().sum();
    let mut params = Vec::with_capacity(in_dims.len() + 1);
    for (i, &d) in in_dims.iter().enumerate() {
        params.push(ParamSpec::new(
            format!("{name}/w{i}"),
            dtype,
            &[d, out_dim],
            Init::Glorot { fan_in, fan_out: out_dim },
        ));
    }
    params.push(ParamSpec::new(format!("{name}/b"), dtype, &[out_dim], Init::Zero));
    Operation::new(
        name,
        in_dims.iter().map(|&d| TensorType::new(dtype, &[d])).collect(),
        vec![TensorType::new(dtype, &[out_dim])],
        params,
        Box::new(FullyConnectedKernel {
            name: name.to_string(),
            n_inputs: in_dims.len(),
            activation,
        }),
    )
}

// ---------------------------------------------------------------------------
// Binary tree LSTM cell
// ---------------------------------------------------------------------------

struct TreeLstmKernel {
    name: String,
    has_x: bool,
}

impl TreeLstmKernel {
    fn weight_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.has_x {
            names.push(format!("{}/wx", self.name));
        }
        names.push(format!("{}/wl", self.name));
        names.push(format!("{}/wr", self.name));
        names
    }

    /// Slot indices of the inputs that feed the linear layer (x when
    /// present, then h_left and h_right); c_left and c_right bypass it.
    fn linear_slots(&self) -> Vec<usize> {
        if self.has_x {
            vec![0, 1, 3]
        } else {
            vec![0, 2]
        }
    }

    fn cell_slots(&self) -> (usize, usize) {
        if self.has_x {
            (2, 4)
        } else {
            (1, 3)
        }
    }
}

impl Kernel for TreeLstmKernel {
    fn forward(&self, inputs: &[Tensor], params: &ParameterStore, mode: Mode) -> Result<KernelOutput> {
        let (cl_slot, cr_slot) = self.cell_slots();
        let (cl, cr) = (&inputs[cl_slot], &inputs[cr_slot]);
        let n = batch_rows(cl);
        let mut pre = kernels::bias_rows(params.get(&format!("{}/b", self.name))?, n)?;
        for (w, &slot) in self.weight_names().iter().zip(&self.linear_slots()) {
            kernels::matmul_acc(&inputs[slot], params.get(w)?, &mut pre)?;
        }
        match mode {
            Mode::Infer => {
                let (h, c) = kernels::lstm_gates(&pre, cl, cr)?;
                Ok(KernelOutput::outputs(vec![h, c]))
            }
            Mode::Train => {
                let (h, c, gates, tanh_c) = kernels::lstm_gates_train(&pre, cl, cr)?;
                Ok(KernelOutput { outputs: vec![h, c], saved: vec![gates, tanh_c] })
            }
        }
    }

    fn backward(
        &self,
        inputs: &[Tensor],
        saved: &[Tensor],
        _outputs: &[Tensor],
        out_grads: &[Tensor],
        params: &ParameterStore,
    ) -> Result<KernelGrads> {
        let (cl_slot, cr_slot) = self.cell_slots();
        let (gates, tanh_c) = (&saved[0], &saved[1]);
        let (dpre, dcl, dcr) = kernels::lstm_gates_backward(
            gates,
            tanh_c,
            &inputs[cl_slot],
            &inputs[cr_slot],
            &out_grads[0],
            &out_grads[1],
        )?;
        let mut input_grads: Vec<Option<Tensor>> = vec![None; inputs.len()];
        let mut param_grads = Vec::new();
        for (w, &slot) in self.weight_names().iter().zip(&self.linear_slots()) {
            input_grads[slot] = Some(kernels::matmul_grad_lhs(&dpre, params.get(w)?)?);
            param_grads.push((w.clone(), kernels::matmul_grad_rhs(&inputs[slot], &dpre)?));
        }
        input_grads[cl_slot] = Some(dcl);
        input_grads[cr_slot] = Some(dcr);
        param_grads.push((format!("{}/b", self.name), kernels::reduce_sum(&dpre, 0)?));
        Ok(KernelGrads { input_grads, param_grads })
    }
}

/// Binary tree LSTM cell with input gate, per-child forget gates, output
/// gate, and candidate, each fed by the optional input vector `x` and both
/// child hidden states:
///
/// ```text
/// pre = [x W_x +] h_l W_l + h_r W_r + b            with pre split [i, f_l, f_r, o, u]
/// c   = sig(i) * tanh(u) + sig(f_l) * c_l + sig(f_r) * c_r
/// h   = sig(o) * tanh(c)
/// ```
///
/// Input slots are `(x,) h_l, c_l, h_r, c_r`; outputs are `(h, c)`.
/// Parameters: `{name}/wx` (if `x_dim` is set), `{name}/wl`, `{name}/wr`
/// of shape `[in, 5*state_dim]`, and `{name}/b` of shape `[5*state_dim]`.
pub fn tree_lstm_cell(name: &str, x_dim: Option<usize>, state_dim: usize, dtype: DType) -> OpHandle {
    let d = state_dim;
    let h = TensorType::new(dtype, &[d]);
    let mut inputs = Vec::new();
    let mut params = Vec::new();
    let fan_in = x_dim.unwrap_or(0) + 2 * d;
    if let Some(x) = x_dim {
        inputs.push(TensorType::new(dtype, &[x]));
        params.push(ParamSpec::new(
            format!("{name}/wx"),
            dtype,
            &[x, 5 * d],
            Init::Glorot { fan_in, fan_out: d },
        ));
    }
    inputs.extend_from_slice(&[h.clone(), h.clone(), h.clone(), h.clone()]);
    for side in ["wl", "wr"] {
        params.push(ParamSpec::new(
            format!("{name}/{side}"),
            dtype,
            &[d, 5 * d],
            Init::Glorot { fan_in, fan_out: d },
        ));
    }
    params.push(ParamSpec::new(format!("{name}/b"), dtype, &[5 * d], Init::Zero));
    Operation::new(
        name,
        inputs,
        vec![h.clone(), h],
        params,
        Box::new(TreeLstmKernel { name: name.to_string(), has_x: x_dim.is_some() }),
    )
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

struct EwBinaryKernel {
    op: BinaryOp,
}

impl Kernel for EwBinaryKernel {
    fn forward(&self, inputs: &[Tensor], _params: &ParameterStore, _mode: Mode) -> Result<KernelOutput> {
        Ok(KernelOutput::outputs(vec![kernels::ew_binary(self.op, &inputs[0], &inputs[1])?]))
    }

    fn backward(
        &self,
        inputs: &[Tensor],
        _saved: &[Tensor],
        _outputs: &[Tensor],
        out_grads: &[Tensor],
        _params: &ParameterStore,
    ) -> Result<KernelGrads> {
        let (da, db) = kernels::ew_binary_grads(self.op, &inputs[0], &inputs[1], &out_grads[0])?;
        Ok(KernelGrads { input_grads: vec![Some(da), Some(db)], param_grads: Vec::new() })
    }
}

/// Elementwise binary arithmetic on two same-typed tensors.
pub fn elementwise_binary(name: &str, op: BinaryOp, t: TensorType) -> OpHandle {
    Operation::new(
        name,
        vec![t.clone(), t.clone()],
        vec![t],
        Vec::new(),
        Box::new(EwBinaryKernel { op }),
    )
}

/// The addition operation sum-style blocks batch on, one per element type.
pub fn sum_add_op(t: &TensorType) -> OpHandle {
    elementwise_binary(&format!("add({t})"), BinaryOp::Add, t.clone())
}

struct EwUnaryKernel {
    op: UnaryOp,
}

impl Kernel for EwUnaryKernel {
    fn forward(&self, inputs: &[Tensor], _params: &ParameterStore, _mode: Mode) -> Result<KernelOutput> {
        Ok(KernelOutput::outputs(vec![kernels::ew_unary(self.op, &inputs[0])?]))
    }

    fn backward(
        &self,
        inputs: &[Tensor],
        _saved: &[Tensor],
        outputs: &[Tensor],
        out_grads: &[Tensor],
        _params: &ParameterStore,
    ) -> Result<KernelGrads> {
        let dx = kernels::ew_unary_grad(self.op, &inputs[0], &outputs[0], &out_grads[0])?;
        Ok(KernelGrads { input_grads: vec![Some(dx)], param_grads: Vec::new() })
    }
}

/// Elementwise unary function on one tensor.
pub fn elementwise_unary(name: &str, op: UnaryOp, t: TensorType) -> OpHandle {
    Operation::new(name, vec![t.clone()], vec![t], Vec::new(), Box::new(EwUnaryKernel { op }))
}

// ---------------------------------------------------------------------------
// Column tiling (scalar feature broadcast into a vector)
// ---------------------------------------------------------------------------

struct TileColsKernel {
    m: usize,
}

impl Kernel for TileColsKernel {
    fn forward(&self, inputs: &[Tensor], _params: &ParameterStore, _mode: Mode) -> Result<KernelOutput> {
        Ok(KernelOutput::outputs(vec![kernels::tile_cols(&inputs[0], self.m)?]))
    }

    fn backward(
        &self,
        _inputs: &[Tensor],
        _saved: &[Tensor],
        _outputs: &[Tensor],
        out_grads: &[Tensor],
        _params: &ParameterStore,
    ) -> Result<KernelGrads> {
        Ok(KernelGrads {
            input_grads: vec![Some(kernels::sum_cols(&out_grads[0])?)],
            param_grads: Vec::new(),
        })
    }
}

/// Replicates a length-1 feature vector to length `m`.
pub fn tile_feature(name: &str, m: usize, dtype: DType) -> OpHandle {
    Operation::new(
        name,
        vec![TensorType::new(dtype, &[1])],
        vec![TensorType::new(dtype, &[m])],
        Vec::new(),
        Box::new(TileColsKernel { m }),
    )
}

// ---------------------------------------------------------------------------
// Feature-axis concatenation
// ---------------------------------------------------------------------------

struct ConcatKernel {
    dims: Vec<usize>,
}

impl Kernel for ConcatKernel {
    fn forward(&self, inputs: &[Tensor], _params: &ParameterStore, _mode: Mode) -> Result<KernelOutput> {
        let refs: Vec<&Tensor> = inputs.iter().collect();
        Ok(KernelOutput::outputs(vec![kernels::concat_cols(&refs)?]))
    }

    fn backward(
        &self,
        _inputs: &[Tensor],
        _saved: &[Tensor],
        _outputs: &[Tensor],
        out_grads: &[Tensor],
        _params: &ParameterStore,
    ) -> Result<KernelGrads> {
        let parts = kernels::split_cols(&out_grads[0], &self.dims)?;
        Ok(KernelGrads {
            input_grads: parts.into_iter().map(Some).collect(),
            param_grads: Vec::new(),
        })
    }
}

/// Concatenates vector inputs along the feature axis.
pub fn concat_feature_axis(name: &str, in_dims: &[usize], dtype: DType) -> OpHandle {
    assert!(!in_dims.is_empty(), "concat_feature_axis needs at least one input");
    let total: usize = in_dims.iter().sum();
    Operation::new(
        name,
        in_dims.iter().map(|&d| TensorType::new(dtype, &[d])).collect(),
        vec![TensorType::new(dtype, &[total])],
        Vec::new(),
        Box::new(ConcatKernel { dims: in_dims.to_vec() }),
    )
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy loss
// ---------------------------------------------------------------------------

struct SoftmaxXentKernel;

impl Kernel for SoftmaxXentKernel {
    fn forward(&self, inputs: &[Tensor], _params: &ParameterStore, _mode: Mode) -> Result<KernelOutput> {
        let loss = kernels::softmax_cross_entropy(&inputs[0], &inputs[1])?;
        Ok(KernelOutput::outputs(vec![loss]))
    }

    fn backward(
        &self,
        inputs: &[Tensor],
        _saved: &[Tensor],
        _outputs: &[Tensor],
        out_grads: &[Tensor],
        _params: &ParameterStore,
    ) -> Result<KernelGrads> {
        let dlogits = kernels::softmax_cross_entropy_grad(&inputs[0], &inputs[1], &out_grads[0])?;
        Ok(KernelGrads { input_grads: vec![Some(dlogits), None], param_grads: Vec::new() })
    }
}

/// Per-example softmax cross-entropy: logits `[n]` and an `i32[]` label in
/// `0..n` become a scalar loss (shape `[1]` is not used; the loss is a
/// rank-0 item, batched to `[b]`).
pub fn softmax_cross_entropy(name: &str, n_classes: usize, dtype: DType) -> OpHandle {
    Operation::new(
        name,
        vec![TensorType::new(dtype, &[n_classes]), TensorType::i32(&[])],
        vec![TensorType::new(dtype, &[])],
        Vec::new(),
        Box::new(SoftmaxXentKernel),
    )
}
