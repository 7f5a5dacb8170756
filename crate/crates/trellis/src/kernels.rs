//! Dense tensor kernels and their adjoints.
//!
//! These are the primitive device-style ops the batched runtime is built
//! from: row concat/gather/scatter, matmul, elementwise math, reductions,
//! and a fused softmax cross-entropy. All kernels are pure functions over
//! row-major buffers; none broadcasts implicitly, and every kernel's
//! gradient counterpart lives next to it.
//!
//! Float32 transcendentals (`exp`, `tanh`, `sigmoid`) use range-reduced
//! polynomial approximations (~1e-7 relative error, exact at 0) so the
//! elementwise loops stay vectorizable; Float64 uses libm and is the dtype
//! used by every accuracy-sensitive test in this crate.

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

/// Binary elementwise op kind. Shapes and dtypes of both operands must
/// match exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
}

impl BinaryOp {
    pub fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
            BinaryOp::Max => "max",
        }
    }
}

/// Unary elementwise op kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum UnaryOp {
    Exp,
    Tanh,
    Sigmoid,
    Relu,
    Neg,
}

impl UnaryOp {
    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Exp => "exp",
            UnaryOp::Tanh => "tanh",
            UnaryOp::Sigmoid => "sigmoid",
            UnaryOp::Relu => "relu",
            UnaryOp::Neg => "neg",
        }
    }
}

/// Fast vectorizable Float32 math. Exact at 0 by construction. These
/// assume finite inputs; NaN propagates as garbage rather than NaN.
pub(crate) mod fastmath {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    // Two-part split of ln 2; the high part is exactly representable so the
    // reduction x - k*ln2 loses no bits.
    const LN2_HI: f32 = 0.693_359_375;
    const LN2_LO: f32 = -2.121_944_4e-4;
    // 1.5 * 2^23. Adding it to a small float rounds ties-even and plants
    // the integer in the low mantissa bits, giving both round-to-nearest
    // and the bit pattern without any float-to-int cast (whose saturating
    // semantics block loop vectorization).
    const MAGIC: f32 = 12_582_912.0;

    #[inline]
    pub fn exp_f32(x: f32) -> f32 {
        let x = x.clamp(-87.0, 88.0);
        let t = x * LOG2E + MAGIC;
        let kf = t - MAGIC;
        let r = x - kf * LN2_HI - kf * LN2_LO;
        let p = 1.0
            + r * (1.0
                + r * (0.5
                    + r * (0.166_666_67
                        + r * (0.041_666_668 + r * (0.008_333_334 + r * 0.001_388_889)))));
        // bits(t) = 0x4B400000 + k for k in [-126, 127], so this rebuilds
        // 2^k directly in the exponent field.
        let two_k = f32::from_bits(t.to_bits().wrapping_sub(0x4B40_0000 - 127) << 23);
        p * two_k
    }

    #[inline]
    pub fn tanh_f32(x: f32) -> f32 {
        // Both branches are branch-free arithmetic so the lane select
        // if-converts under vectorization. Small arguments go through an
        // odd polynomial; the exp-based form cancels catastrophically near
        // zero.
        let ax = x.abs();
        let z = x * x;
        let p = (((-5.704_988_7e-3 * z + 2.063_908_9e-2) * z - 5.373_971_6e-2) * z
            + 1.333_144_2e-1)
            * z
            - 3.333_328_2e-1;
        let small = x + x * z * p;
        let v = 1.0 - 2.0 / (exp_f32(2.0 * ax) + 1.0);
        let big = if x < 0.0 { -v } else { v };
        if ax < 0.625 {
            small
        } else {
            big
        }
    }

    #[inline]
    pub fn sigmoid_f32(x: f32) -> f32 {
        1.0 / (1.0 + exp_f32(-x))
    }
}

/// The two float element types, abstracted for kernel implementations.
pub(crate) trait Real:
    Copy
    + PartialOrd
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
{
    const ZERO: Self;
    const ONE: Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sigmoid(self) -> Self;
    fn maxv(self, o: Self) -> Self;
    fn from_f64(v: f64) -> Self;
    fn mul_add(self, b: Self, c: Self) -> Self;
    fn sqrt(self) -> Self;
}

impl Real for f32 {
    const ZERO: f32 = 0.0;
    const ONE: f32 = 1.0;
    #[inline]
    fn exp(self) -> f32 {
        fastmath::exp_f32(self)
    }
    #[inline]
    fn ln(self) -> f32 {
        f32::ln(self)
    }
    #[inline]
    fn tanh(self) -> f32 {
        fastmath::tanh_f32(self)
    }
    #[inline]
    fn sigmoid(self) -> f32 {
        fastmath::sigmoid_f32(self)
    }
    #[inline]
    fn maxv(self, o: f32) -> f32 {
        f32::max(self, o)
    }
    #[inline]
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    #[inline]
    fn mul_add(self, b: f32, c: f32) -> f32 {
        f32::mul_add(self, b, c)
    }
    #[inline]
    fn sqrt(self) -> f32 {
        f32::sqrt(self)
    }
}

impl Real for f64 {
    const ZERO: f64 = 0.0;
    const ONE: f64 = 1.0;
    #[inline]
    fn exp(self) -> f64 {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> f64 {
        f64::ln(self)
    }
    #[inline]
    fn tanh(self) -> f64 {
        f64::tanh(self)
    }
    #[inline]
    fn sigmoid(self) -> f64 {
        1.0 / (1.0 + f64::exp(-self))
    }
    #[inline]
    fn maxv(self, o: f64) -> f64 {
        f64::max(self, o)
    }
    #[inline]
    fn from_f64(v: f64) -> f64 {
        v
    }
    #[inline]
    fn mul_add(self, b: f64, c: f64) -> f64 {
        f64::mul_add(self, b, c)
    }
    #[inline]
    fn sqrt(self) -> f64 {
        f64::sqrt(self)
    }
}

fn want_float(t: &Tensor, what: &str) -> Result<()> {
    match t.dtype() {
        DType::Float32 | DType::Float64 => Ok(()),
        DType::Int32 => Err(Error::Tensor(format!("{what} does not support i32"))),
    }
}

fn want_same_dtype(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dtype() != b.dtype() {
        return Err(Error::Tensor(format!(
            "{what}: dtype mismatch {} vs {}",
            a.dtype(),
            b.dtype()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Row movement: concat / split / stack / gather / scatter-add
// ---------------------------------------------------------------------------

/// Concatenates along the leading axis. All parts must agree on dtype and
/// item shape; zero-row parts are legal.
pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Tensor("concat_rows needs at least one part".into()))?;
    if first.rank() == 0 {
        return Err(Error::Tensor("concat_rows needs rank >= 1".into()));
    }
    let item: &[usize] = &first.shape()[1..];
    let mut rows = 0usize;
    for p in parts {
        want_same_dtype(first, p, "concat_rows")?;
        if p.rank() == 0 || &p.shape()[1..] != item {
            return Err(Error::Tensor(format!(
                "concat_rows: item shape mismatch {:?} vs {:?}",
                first.shape(),
                p.shape()
            )));
        }
        rows += p.rows();
    }
    let mut shape = vec![rows];
    shape.extend_from_slice(item);
    let mut out = Tensor::zeros(first.dtype(), &shape);
    match first.dtype() {
        DType::Float32 => copy_concat(parts, out.as_f32_mut()?, |p| p.as_f32())?,
        DType::Float64 => copy_concat(parts, out.as_f64_mut()?, |p| p.as_f64())?,
        DType::Int32 => copy_concat(parts, out.as_i32_mut()?, |p| p.as_i32())?,
    }
    Ok(out)
}

fn copy_concat<'t, T: Copy + 't>(
    parts: &[&'t Tensor],
    out: &mut [T],
    get: impl Fn(&'t Tensor) -> Result<&'t [T]>,
) -> Result<()> {
    let mut at = 0usize;
    for p in parts {
        let src = get(p)?;
        out[at..at + src.len()].copy_from_slice(src);
        at += src.len();
    }
    Ok(())
}

/// Adjoint of `concat_rows`: splits back into parts of the given row counts.
pub fn split_rows(t: &Tensor, row_counts: &[usize]) -> Result<Vec<Tensor>> {
    if t.rank() == 0 {
        return Err(Error::Tensor("split_rows needs rank >= 1".into()));
    }
    let total: usize = row_counts.iter().sum();
    if total != t.rows() {
        return Err(Error::Tensor(format!(
            "split_rows: counts sum to {} but tensor has {} rows",
            total,
            t.rows()
        )));
    }
    let mut out = Vec::with_capacity(row_counts.len());
    let mut at = 0usize;
    for &n in row_counts {
        let idx: Vec<usize> = (at..at + n).collect();
        out.push(gather_rows(t, &idx)?);
        at += n;
    }
    Ok(out)
}

/// Stacks items along a new leading axis: k items of shape `s` become
/// `[k, s...]`. Rank-0 items stack into a `[k]` vector.
pub fn stack_rows(items: &[&Tensor]) -> Result<Tensor> {
    let first = items
        .first()
        .ok_or_else(|| Error::Tensor("stack_rows needs at least one item".into()))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut out = Tensor::zeros(first.dtype(), &shape);
    for (i, item) in items.iter().enumerate() {
        want_same_dtype(first, item, "stack_rows")?;
        if item.shape() != first.shape() {
            return Err(Error::Tensor(format!(
                "stack_rows: item shape mismatch {:?} vs {:?}",
                first.shape(),
                item.shape()
            )));
        }
        let w = first.len();
        match first.dtype() {
            DType::Float32 => {
                out.as_f32_mut()?[i * w..(i + 1) * w].copy_from_slice(item.as_f32()?)
            }
            DType::Float64 => {
                out.as_f64_mut()?[i * w..(i + 1) * w].copy_from_slice(item.as_f64()?)
            }
            DType::Int32 => out.as_i32_mut()?[i * w..(i + 1) * w].copy_from_slice(item.as_i32()?),
        }
    }
    Ok(out)
}

/// Selects rows along the leading axis: `out[k] = t[idx[k]]`. Duplicate
/// indices are legal; an empty index list yields zero rows.
pub fn gather_rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    if t.rank() == 0 {
        return Err(Error::Tensor("gather_rows needs rank >= 1".into()));
    }
    let rows = t.rows();
    for &i in idx {
        if i >= rows {
            return Err(Error::Tensor(format!(
                "gather_rows: index {i} out of range for {rows} rows"
            )));
        }
    }
    let w = t.row_len();
    let mut shape = vec![idx.len()];
    shape.extend_from_slice(&t.shape()[1..]);
    let mut out = Tensor::zeros(t.dtype(), &shape);
    match t.dtype() {
        DType::Float32 => copy_gather(t.as_f32()?, idx, w, out.as_f32_mut()?),
        DType::Float64 => copy_gather(t.as_f64()?, idx, w, out.as_f64_mut()?),
        DType::Int32 => copy_gather(t.as_i32()?, idx, w, out.as_i32_mut()?),
    }
    Ok(out)
}

fn copy_gather<T: Copy>(src: &[T], idx: &[usize], w: usize, out: &mut [T]) {
    for (k, &i) in idx.iter().enumerate() {
        out[k * w..(k + 1) * w].copy_from_slice(&src[i * w..(i + 1) * w]);
    }
}

/// Adjoint of `gather_rows`: `out[idx[k]] += src[k]` into a zero tensor of
/// `out_rows` rows. Duplicate indices accumulate.
pub fn scatter_add_rows(src: &Tensor, idx: &[usize], out_rows: usize) -> Result<Tensor> {
    if src.rank() == 0 {
        return Err(Error::Tensor("scatter_add_rows needs rank >= 1".into()));
    }
    if src.rows() != idx.len() {
        return Err(Error::Tensor(format!(
            "scatter_add_rows: {} rows but {} indices",
            src.rows(),
            idx.len()
        )));
    }
    for &i in idx {
        if i >= out_rows {
            return Err(Error::Tensor(format!(
                "scatter_add_rows: index {i} out of range for {out_rows} rows"
            )));
        }
    }
    let w = src.row_len();
    let mut shape = vec![out_rows];
    shape.extend_from_slice(&src.shape()[1..]);
    let mut out = Tensor::zeros(src.dtype(), &shape);
    match src.dtype() {
        DType::Float32 => add_scatter(src.as_f32()?, idx, w, out.as_f32_mut()?),
        DType::Float64 => add_scatter(src.as_f64()?, idx, w, out.as_f64_mut()?),
        DType::Int32 => add_scatter(src.as_i32()?, idx, w, out.as_i32_mut()?),
    }
    Ok(out)
}

fn add_scatter<T: Copy + std::ops::AddAssign>(src: &[T], idx: &[usize], w: usize, out: &mut [T]) {
    for (k, &i) in idx.iter().enumerate() {
        let dst = &mut out[i * w..(i + 1) * w];
        let s = &src[k * w..(k + 1) * w];
        for (d, &v) in dst.iter_mut().zip(s) {
            *d += v;
        }
    }
}

fn rows_compatible(dst: &Tensor, src: &Tensor, base: usize, what: &str) -> Result<usize> {
    want_same_dtype(dst, src, what)?;
    if dst.rank() == 0 || src.rank() == 0 || dst.shape()[1..] != src.shape()[1..] {
        return Err(Error::Tensor(format!(
            "{what}: item shape mismatch {:?} vs {:?}",
            dst.shape(),
            src.shape()
        )));
    }
    if base + src.rows() > dst.rows() {
        return Err(Error::Tensor(format!(
            "{what}: rows {base}..{} exceed {} destination rows",
            base + src.rows(),
            dst.rows()
        )));
    }
    Ok(dst.row_len())
}

/// Copies all rows of `src` into `dst` starting at row `base`.
pub fn copy_rows_into(dst: &mut Tensor, base: usize, src: &Tensor) -> Result<()> {
    let w = rows_compatible(dst, src, base, "copy_rows_into")?;
    let (lo, hi) = (base * w, (base + src.rows()) * w);
    match dst.dtype() {
        DType::Float32 => dst.as_f32_mut()?[lo..hi].copy_from_slice(src.as_f32()?),
        DType::Float64 => dst.as_f64_mut()?[lo..hi].copy_from_slice(src.as_f64()?),
        DType::Int32 => dst.as_i32_mut()?[lo..hi].copy_from_slice(src.as_i32()?),
    }
    Ok(())
}

/// Adds row `k` of `src` into row `idx[k]` of `dst`; duplicate indices
/// accumulate.
pub fn add_rows_into(dst: &mut Tensor, idx: &[usize], src: &Tensor) -> Result<()> {
    let w = rows_compatible(dst, src, 0, "add_rows_into")?;
    if src.rows() != idx.len() {
        return Err(Error::Tensor(format!(
            "add_rows_into: {} rows but {} indices",
            src.rows(),
            idx.len()
        )));
    }
    let rows = dst.rows();
    for &i in idx {
        if i >= rows {
            return Err(Error::Tensor(format!(
                "add_rows_into: index {i} out of range for {rows} rows"
            )));
        }
    }
    match dst.dtype() {
        DType::Float32 => add_scatter(src.as_f32()?, idx, w, dst.as_f32_mut()?),
        DType::Float64 => add_scatter(src.as_f64()?, idx, w, dst.as_f64_mut()?),
        DType::Int32 => add_scatter(src.as_i32()?, idx, w, dst.as_i32_mut()?),
    }
    Ok(())
}

/// Copies `rows` consecutive rows of `t` starting at `base` into a new
/// tensor.
pub fn slice_rows(t: &Tensor, base: usize, rows: usize) -> Result<Tensor> {
    if t.rank() == 0 {
        return Err(Error::Tensor("slice_rows needs rank >= 1".into()));
    }
    if base + rows > t.rows() {
        return Err(Error::Tensor(format!(
            "slice_rows: rows {base}..{} exceed {} rows",
            base + rows,
            t.rows()
        )));
    }
    let w = t.row_len();
    let mut shape = vec![rows];
    shape.extend_from_slice(&t.shape()[1..]);
    let mut out = Tensor::zeros(t.dtype(), &shape);
    let (lo, hi) = (base * w, (base + rows) * w);
    match t.dtype() {
        DType::Float32 => out.as_f32_mut()?.copy_from_slice(&t.as_f32()?[lo..hi]),
        DType::Float64 => out.as_f64_mut()?.copy_from_slice(&t.as_f64()?[lo..hi]),
        DType::Int32 => out.as_i32_mut()?.copy_from_slice(&t.as_i32()?[lo..hi]),
    }
    Ok(out)
}

/// Adds `src` into `dst` elementwise; shapes must match.
pub fn add_into(dst: &mut Tensor, src: &Tensor) -> Result<()> {
    want_same_dtype(dst, src, "add_into")?;
    if dst.shape() != src.shape() {
        return Err(Error::Tensor(format!(
            "add_into: shape mismatch {:?} vs {:?}",
            dst.shape(),
            src.shape()
        )));
    }
    fn add<T: Copy + std::ops::AddAssign>(dst: &mut [T], src: &[T]) {
        for (d, &s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    }
    match dst.dtype() {
        DType::Float32 => add(dst.as_f32_mut()?, src.as_f32()?),
        DType::Float64 => add(dst.as_f64_mut()?, src.as_f64()?),
        DType::Int32 => add(dst.as_i32_mut()?, src.as_i32()?),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Matmul
// ---------------------------------------------------------------------------

fn matmul_dims(a: &Tensor, b: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    want_float(a, what)?;
    want_same_dtype(a, b, what)?;
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::Tensor(format!(
            "{what} needs rank-2 operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok((a.shape()[0], a.shape()[1], b.shape()[1]))
}

/// `[n,k] x [k,m] -> [n,m]`. Float dtypes only.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut out = Tensor::zeros(a.dtype(), &[a.rows(), if b.rank() == 2 { b.shape()[1] } else { 0 }]);
    matmul_acc(a, b, &mut out)?;
    Ok(out)
}

/// `out += a x b` with `a: [n,k]`, `b: [k,m]`, `out: [n,m]`. The batched
/// runtime leans on this to fold multi-input linear layers into one output
/// buffer without materializing concatenated inputs.
pub fn matmul_acc(a: &Tensor, b: &Tensor, out: &mut Tensor) -> Result<()> {
    let (n, k, m) = matmul_dims(a, b, "matmul")?;
    if b.shape()[0] != k {
        return Err(Error::Tensor(format!(
            "matmul: inner dims disagree, {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if out.dtype() != a.dtype() || out.shape() != [n, m] {
        return Err(Error::Tensor(format!(
            "matmul: output is {} {:?}, want {} [{n}, {m}]",
            out.dtype(),
            out.shape(),
            a.dtype()
        )));
    }
    match a.dtype() {
        DType::Float32 => matmul_impl(a.as_f32()?, b.as_f32()?, n, k, m, out.as_f32_mut()?),
        DType::Float64 => matmul_impl(a.as_f64()?, b.as_f64()?, n, k, m, out.as_f64_mut()?),
        DType::Int32 => unreachable!(),
    }
    Ok(())
}

// Row-register block: how many output rows share one sweep of b.
const MR: usize = 8;
// Column tile width; accumulators for an MR x NR tile live in registers
// across the whole k loop.
const NR: usize = 32;

// A fused-multiply-add microkernel tiled so the k loop touches memory only
// for a-scalars and one b-row segment per step. Every path (full tile,
// column tail, short row block) accumulates each output element as a single
// mul_add chain in ascending k order, so a given input row produces
// bit-identical output no matter which batch it is evaluated in.
fn matmul_impl<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize, out: &mut [T]) {
    let mut i = 0usize;
    while i + MR <= n {
        row_block::<T, MR>(a, b, i, k, m, out);
        i += MR;
    }
    match n - i {
        0 => {}
        1 => row_block::<T, 1>(a, b, i, k, m, out),
        2 => row_block::<T, 2>(a, b, i, k, m, out),
        3 => row_block::<T, 3>(a, b, i, k, m, out),
        4 => row_block::<T, 4>(a, b, i, k, m, out),
        5 => row_block::<T, 5>(a, b, i, k, m, out),
        6 => row_block::<T, 6>(a, b, i, k, m, out),
        _ => row_block::<T, 7>(a, b, i, k, m, out),
    }
}

fn row_block<T: Real, const R: usize>(
    a: &[T],
    b: &[T],
    i0: usize,
    k: usize,
    m: usize,
    out: &mut [T],
) {
    let mut j = 0usize;
    while j + NR <= m {
        let mut acc = [[T::ZERO; NR]; R];
        for kk in 0..k {
            let w = &b[kk * m + j..kk * m + j + NR];
            for r in 0..R {
                let c = a[(i0 + r) * k + kk];
                let accr = &mut acc[r];
                for x in 0..NR {
                    accr[x] = c.mul_add(w[x], accr[x]);
                }
            }
        }
        for (r, accr) in acc.iter().enumerate() {
            let dst = &mut out[(i0 + r) * m + j..(i0 + r) * m + j + NR];
            for x in 0..NR {
                dst[x] = dst[x] + accr[x];
            }
        }
        j += NR;
    }
    if j < m {
        let width = m - j;
        let mut acc = vec![T::ZERO; R * width];
        for kk in 0..k {
            let w = &b[kk * m + j..(kk + 1) * m];
            for r in 0..R {
                let c = a[(i0 + r) * k + kk];
                let accr = &mut acc[r * width..(r + 1) * width];
                for x in 0..width {
                    accr[x] = c.mul_add(w[x], accr[x]);
                }
            }
        }
        for r in 0..R {
            let dst = &mut out[(i0 + r) * m + j..(i0 + r) * m + j + width];
            for (d, &v) in dst.iter_mut().zip(&acc[r * width..(r + 1) * width]) {
                *d = *d + v;
            }
        }
    }
}

/// Gradient of `matmul` w.r.t. its left operand: `dA = dY x B^T`.
pub fn matmul_grad_lhs(dy: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, m, _) = matmul_dims(dy, b, "matmul_grad_lhs")?;
    if b.shape()[1] != m {
        return Err(Error::Tensor(format!(
            "matmul_grad_lhs: {:?} vs {:?}",
            dy.shape(),
            b.shape()
        )));
    }
    let k = b.shape()[0];
    let mut out = Tensor::zeros(dy.dtype(), &[n, k]);
    match dy.dtype() {
        DType::Float32 => grad_lhs_impl(dy.as_f32()?, b.as_f32()?, n, k, m, out.as_f32_mut()?),
        DType::Float64 => grad_lhs_impl(dy.as_f64()?, b.as_f64()?, n, k, m, out.as_f64_mut()?),
        DType::Int32 => unreachable!(),
    }
    Ok(out)
}

fn grad_lhs_impl<T: Real>(dy: &[T], b: &[T], n: usize, k: usize, m: usize, out: &mut [T]) {
    for i in 0..n {
        let dyr = &dy[i * m..(i + 1) * m];
        let or = &mut out[i * k..(i + 1) * k];
        for kk in 0..k {
            let br = &b[kk * m..(kk + 1) * m];
            let mut acc = T::ZERO;
            for j in 0..m {
                acc = dyr[j].mul_add(br[j], acc);
            }
            or[kk] = acc;
        }
    }
}

/// Gradient of `matmul` w.r.t. its right operand: `dB = A^T x dY`.
pub fn matmul_grad_rhs(a: &Tensor, dy: &Tensor) -> Result<Tensor> {
    let (n, k, m) = matmul_dims(a, dy, "matmul_grad_rhs")?;
    if dy.shape()[0] != n {
        return Err(Error::Tensor(format!(
            "matmul_grad_rhs: {:?} vs {:?}",
            a.shape(),
            dy.shape()
        )));
    }
    let mut out = Tensor::zeros(a.dtype(), &[k, m]);
    match a.dtype() {
        DType::Float32 => grad_rhs_impl(a.as_f32()?, dy.as_f32()?, n, k, m, out.as_f32_mut()?),
        DType::Float64 => grad_rhs_impl(a.as_f64()?, dy.as_f64()?, n, k, m, out.as_f64_mut()?),
        DType::Int32 => unreachable!(),
    }
    Ok(out)
}

fn grad_rhs_impl<T: Real>(a: &[T], dy: &[T], n: usize, k: usize, m: usize, out: &mut [T]) {
    for i in 0..n {
        let ar = &a[i * k..(i + 1) * k];
        let dyr = &dy[i * m..(i + 1) * m];
        for kk in 0..k {
            let c = ar[kk];
            let or = &mut out[kk * m..(kk + 1) * m];
            for j in 0..m {
                or[j] = c.mul_add(dyr[j], or[j]);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

fn want_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Tensor(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Elementwise binary op over exactly matching shapes. Float dtypes only;
/// `Div` follows IEEE semantics (no zero checks), `Max` uses the primitive
/// float max.
pub fn ew_binary(op: BinaryOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    want_float(a, "ew_binary")?;
    want_same_dtype(a, b, "ew_binary")?;
    want_same_shape(a, b, "ew_binary")?;
    let mut out = Tensor::zeros(a.dtype(), a.shape());
    match a.dtype() {
        DType::Float32 => binary_impl(op, a.as_f32()?, b.as_f32()?, out.as_f32_mut()?),
        DType::Float64 => binary_impl(op, a.as_f64()?, b.as_f64()?, out.as_f64_mut()?),
        DType::Int32 => unreachable!(),
    }
    Ok(out)
}

fn binary_impl<T: Real>(op: BinaryOp, a: &[T], b: &[T], out: &mut [T]) {
    match op {
        BinaryOp::Add => {
            for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
                *o = x + y;
            }
        }
        BinaryOp::Sub => {
            for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
                *o = x - y;
            }
        }
        BinaryOp::Mul => {
            for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
                *o = x * y;
            }
        }
        BinaryOp::Div => {
            for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
                *o = x / y;
            }
        }
        BinaryOp::Max => {
            for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
                *o = x.maxv(y);
            }
        }
    }
}

/// Gradients of `ew_binary` w.r.t. both operands. For `Max`, ties route the
/// gradient to the first operand, matching the forward value choice.
pub fn ew_binary_grads(
    op: BinaryOp,
    a: &Tensor,
    b: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Tensor)> {
    want_float(a, "ew_binary_grads")?;
    want_same_dtype(a, b, "ew_binary_grads")?;
    want_same_shape(a, b, "ew_binary_grads")?;
    want_same_shape(a, dy, "ew_binary_grads")?;
    let mut da = Tensor::zeros(a.dtype(), a.shape());
    let mut db = Tensor::zeros(a.dtype(), a.shape());
    match a.dtype() {
        DType::Float32 => binary_grads_impl(
            op,
            a.as_f32()?,
            b.as_f32()?,
            dy.as_f32()?,
            da.as_f32_mut()?,
            db.as_f32_mut()?,
        ),
        DType::Float64 => binary_grads_impl(
            op,
            a.as_f64()?,
            b.as_f64()?,
            dy.as_f64()?,
            da.as_f64_mut()?,
            db.as_f64_mut()?,
        ),
        DType::Int32 => unreachable!(),
    }
    Ok((da, db))
}

fn binary_grads_impl<T: Real>(
    op: BinaryOp,
    a: &[T],
    b: &[T],
    dy: &[T],
    da: &mut [T],
    db: &mut [T],
) {
    for i in 0..a.len() {
        let (x, y, g) = (a[i], b[i], dy[i]);
        let (gx, gy) = match op {
            BinaryOp::Add => (g, g),
            BinaryOp::Sub => (g, -g),
            BinaryOp::Mul => (g * y, g * x),
            BinaryOp::Div => (g / y, -g * x / (y * y)),
            BinaryOp::Max => {
                if x >= y {
                    (g, T::ZERO)
                } else {
                    (T::ZERO, g)
                }
            }
        };
        da[i] = gx;
        db[i] = gy;
    }
}

/// Elementwise unary op. Float dtypes only.
pub fn ew_unary(op: UnaryOp, a: &Tensor) -> Result<Tensor> {
    want_float(a, "ew_unary")?;
    let mut out = Tensor::zeros(a.dtype(), a.shape());
    match a.dtype() {
        DType::Float32 => unary_impl(op, a.as_f32()?, out.as_f32_mut()?),
        DType::Float64 => unary_impl(op, a.as_f64()?, out.as_f64_mut()?),
        DType::Int32 => unreachable!(),
    }
    Ok(out)
}

fn unary_impl<T: Real>(op: UnaryOp, a: &[T], out: &mut [T]) {
    match op {
        UnaryOp::Exp => {
            for (o, &x) in out.iter_mut().zip(a) {
                *o = x.exp();
            }
        }
        UnaryOp::Tanh => {
            for (o, &x) in out.iter_mut().zip(a) {
                *o = x.tanh();
            }
        }
        UnaryOp::Sigmoid => {
            for (o, &x) in out.iter_mut().zip(a) {
                *o = x.sigmoid();
            }
        }
        UnaryOp::Relu => {
            for (o, &x) in out.iter_mut().zip(a) {
                *o = x.maxv(T::ZERO);
            }
        }
        UnaryOp::Neg => {
            for (o, &x) in out.iter_mut().zip(a) {
                *o = -x;
            }
        }
    }
}

/// Gradient of `ew_unary`, expressed over the saved input `x` and output
/// `y` so no transcendental is recomputed.
pub fn ew_unary_grad(op: UnaryOp, x: &Tensor, y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    want_float(x, "ew_unary_grad")?;
    want_same_shape(x, dy, "ew_unary_grad")?;
    let mut dx = Tensor::zeros(x.dtype(), x.shape());
    match x.dtype() {
        DType::Float32 => unary_grad_impl(
            op,
            x.as_f32()?,
            y.as_f32()?,
            dy.as_f32()?,
            dx.as_f32_mut()?,
        ),
        DType::Float64 => unary_grad_impl(
            op,
            x.as_f64()?,
            y.as_f64()?,
            dy.as_f64()?,
            dx.as_f64_mut()?,
        ),
        DType::Int32 => unreachable!(),
    }
    Ok(dx)
}

fn unary_grad_impl<T: Real>(op: UnaryOp, x: &[T], y: &[T], dy: &[T], dx: &mut [T]) {
    for i in 0..x.len() {
        dx[i] = match op {
            UnaryOp::Exp => dy[i] * y[i],
            UnaryOp::Tanh => dy[i] * (T::ONE - y[i] * y[i]),
            UnaryOp::Sigmoid => dy[i] * y[i] * (T::ONE - y[i]),
            UnaryOp::Relu => {
                if x[i] > T::ZERO {
                    dy[i]
                } else {
                    T::ZERO
                }
            }
            UnaryOp::Neg => -dy[i],
        };
    }
}

// ---------------------------------------------------------------------------
// Reductions and column helpers
// ---------------------------------------------------------------------------

/// Sums over one axis; the result drops that axis. Accumulation runs in
/// ascending index order along the axis, so results are deterministic.
pub fn reduce_sum(t: &Tensor, axis: usize) -> Result<Tensor> {
    want_float(t, "reduce_sum")?;
    if axis >= t.rank() {
        return Err(Error::Tensor(format!(
            "reduce_sum: axis {axis} out of range for shape {:?}",
            t.shape()
        )));
    }
    let outer: usize = t.shape()[..axis].iter().product();
    let mid = t.shape()[axis];
    let inner: usize = t.shape()[axis + 1..].iter().product();
    let mut shape = t.shape().to_vec();
    shape.remove(axis);
    let mut out = Tensor::zeros(t.dtype(), &shape);
    match t.dtype() {
        DType::Float32 => reduce_impl(t.as_f32()?, outer, mid, inner, out.as_f32_mut()?),
        DType::Float64 => reduce_impl(t.as_f64()?, outer, mid, inner, out.as_f64_mut()?),
        DType::Int32 => unreachable!(),
    }
    Ok(out)
}

fn reduce_impl<T: Real>(x: &[T], outer: usize, mid: usize, inner: usize, out: &mut [T]) {
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for a in 0..mid {
            let src = &x[(o * mid + a) * inner..(o * mid + a + 1) * inner];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = *d + v;
            }
        }
    }
}

/// Gradient of `reduce_sum`: replicates `dy` back along the dropped axis.
pub fn reduce_sum_grad(dy: &Tensor, input_shape: &[usize], axis: usize) -> Result<Tensor> {
    want_float(dy, "reduce_sum_grad")?;
    let mut want = input_shape.to_vec();
    want.remove(axis);
    if dy.shape() != want.as_slice() {
        return Err(Error::Tensor(format!(
            "reduce_sum_grad: dy shape {:?} does not match reduced {:?}",
            dy.shape(),
            want
        )));
    }
    let outer: usize = input_shape[..axis].iter().product();
    let mid = input_shape[axis];
    let inner: usize = input_shape[axis + 1..].iter().product();
    let mut out = Tensor::zeros(dy.dtype(), input_shape);
    match dy.dtype() {
        DType::Float32 => {
            let src = dy.as_f32()?;
            let dst = out.as_f32_mut()?;
            spread_impl(src, outer, mid, inner, dst);
        }
        DType::Float64 => {
            let src = dy.as_f64()?;
            let dst = out.as_f64_mut()?;
            spread_impl(src, outer, mid, inner, dst);
        }
        DType::Int32 => unreachable!(),
    }
    Ok(out)
}

fn spread_impl<T: Copy>(src: &[T], outer: usize, mid: usize, inner: usize, dst: &mut [T]) {
    for o in 0..outer {
        let s = &src[o * inner..(o + 1) * inner];
        for a in 0..mid {
            dst[(o * mid + a) * inner..(o * mid + a + 1) * inner].copy_from_slice(s);
        }
    }
}

/// Replicates a bias vector `[m]` into `n` rows: `[n,m]`. The usual seed
/// for an accumulating linear layer.
pub fn bias_rows(bias: &Tensor, n: usize) -> Result<Tensor> {
    want_float(bias, "bias_rows")?;
    if bias.rank() != 1 {
        return Err(Error::Tensor(format!(
            "bias_rows wants a vector, got {:?}",
            bias.shape()
        )));
    }
    let m = bias.shape()[0];
    match bias.dtype() {
        DType::Float32 => {
            let src = bias.as_f32()?;
            let mut v = Vec::with_capacity(n * m);
            for _ in 0..n {
                v.extend_from_slice(src);
            }
            Tensor::from_f32(&[n, m], v)
        }
        DType::Float64 => {
            let src = bias.as_f64()?;
            let mut v = Vec::with_capacity(n * m);
            for _ in 0..n {
                v.extend_from_slice(src);
            }
            Tensor::from_f64(&[n, m], v)
        }
        DType::Int32 => unreachable!(),
    }
}

/// Replicates a `[b,1]` column to `[b,m]`.
pub fn tile_cols(t: &Tensor, m: usize) -> Result<Tensor> {
    want_float(t, "tile_cols")?;
    if t.rank() != 2 || t.shape()[1] != 1 {
        return Err(Error::Tensor(format!(
            "tile_cols wants shape [b,1], got {:?}",
            t.shape()
        )));
    }
    let b = t.shape()[0];
    let mut out = Tensor::zeros(t.dtype(), &[b, m]);
    match t.dtype() {
        DType::Float32 => tile_impl(t.as_f32()?, m, out.as_f32_mut()?),
        DType::Float64 => tile_impl(t.as_f64()?, m, out.as_f64_mut()?),
        DType::Int32 => unreachable!(),
    }
    Ok(out)
}

fn tile_impl<T: Copy>(src: &[T], m: usize, out: &mut [T]) {
    for (i, &v) in src.iter().enumerate() {
        for o in out[i * m..(i + 1) * m].iter_mut() {
            *o = v;
        }
    }
}

/// Concatenates rank-2 tensors along the feature axis:
/// `[b,d1], [b,d2], ...` becomes `[b, d1+d2+...]`.
pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Tensor("concat_cols on empty list".to_string()));
    }
    let b = parts[0].shape().first().copied().unwrap_or(0);
    let dt = parts[0].dtype();
    let mut total = 0;
    for p in parts {
        want_float(p, "concat_cols")?;
        if p.dtype() != dt {
            return Err(Error::Tensor("concat_cols: mixed dtypes".to_string()));
        }
        if p.rank() != 2 || p.shape()[0] != b {
            return Err(Error::Tensor(format!(
                "concat_cols: want [{b},*], got {:?}",
                p.shape()
            )));
        }
        total += p.shape()[1];
    }
    let mut out = Tensor::zeros(dt, &[b, total]);
    match dt {
        DType::Float32 => {
            let dst = out.as_f32_mut()?;
            let mut col = 0;
            for p in parts {
                let d = p.shape()[1];
                concat_cols_impl(p.as_f32()?, d, dst, col, total, b);
                col += d;
            }
        }
        DType::Float64 => {
            let dst = out.as_f64_mut()?;
            let mut col = 0;
            for p in parts {
                let d = p.shape()[1];
                concat_cols_impl(p.as_f64()?, d, dst, col, total, b);
                col += d;
            }
        }
        DType::Int32 => unreachable!(),
    }
    Ok(out)
}

fn concat_cols_impl<T: Copy>(src: &[T], d: usize, dst: &mut [T], col: usize, total: usize, b: usize) {
    for r in 0..b {
        dst[r * total + col..r * total + col + d].copy_from_slice(&src[r * d..(r + 1) * d]);
    }
}

/// Adjoint of `concat_cols`: slices `[b, d1+d2+...]` back into column blocks.
pub fn split_cols(t: &Tensor, col_counts: &[usize]) -> Result<Vec<Tensor>> {
    want_float(t, "split_cols")?;
    if t.rank() != 2 {
        return Err(Error::Tensor(format!(
            "split_cols wants rank 2, got {:?}",
            t.shape()
        )));
    }
    let (b, total) = (t.shape()[0], t.shape()[1]);
    if col_counts.iter().sum::<usize>() != total {
        return Err(Error::Tensor(format!(
            "split_cols: column counts {col_counts:?} do not sum to {total}"
        )));
    }
    let mut out = Vec::with_capacity(col_counts.len());
    let mut col = 0;
    for &d in col_counts {
        let mut part = Tensor::zeros(t.dtype(), &[b, d]);
        match t.dtype() {
            DType::Float32 => {
                split_cols_impl(t.as_f32()?, part.as_f32_mut()?, col, d, total, b)
            }
            DType::Float64 => {
                split_cols_impl(t.as_f64()?, part.as_f64_mut()?, col, d, total, b)
            }
            DType::Int32 => unreachable!(),
        }
        col += d;
        out.push(part);
    }
    Ok(out)
}

fn split_cols_impl<T: Copy>(src: &[T], dst: &mut [T], col: usize, d: usize, total: usize, b: usize) {
    for r in 0..b {
        dst[r * d..(r + 1) * d].copy_from_slice(&src[r * total + col..r * total + col + d]);
    }
}

/// Adjoint of `tile_cols`: sums each row of `[b,m]` down to `[b,1]`.
pub fn sum_cols(t: &Tensor) -> Result<Tensor> {
    want_float(t, "sum_cols")?;
    if t.rank() != 2 {
        return Err(Error::Tensor(format!(
            "sum_cols wants rank 2, got {:?}",
            t.shape()
        )));
    }
    let reduced = reduce_sum(t, 1)?;
    reduced.reshape(&[t.shape()[0], 1])
}

// ---------------------------------------------------------------------------
// Fused tree-LSTM gate math
// ---------------------------------------------------------------------------
//
// Gate layout in the pre-activation tensor [b, 5d], in column blocks of d:
// input gate i, left forget gate fl, right forget gate fr, output gate o,
// candidate u. The cell update is
//   c = i*u + fl*cl + fr*cr,  h = o * tanh(c)
// with sigmoid on i, fl, fr, o and tanh on u. Fusing the whole update into
// one pass avoids materializing any [b, 5d] intermediates.

fn lstm_dims(pre: &Tensor, cl: &Tensor, cr: &Tensor) -> Result<(usize, usize)> {
    want_float(pre, "lstm_gates")?;
    want_same_dtype(pre, cl, "lstm_gates")?;
    want_same_dtype(pre, cr, "lstm_gates")?;
    if pre.rank() != 2 || cl.rank() != 2 || cl.shape() != cr.shape() {
        return Err(Error::Tensor(format!(
            "lstm_gates: want pre [b,5d], cl/cr [b,d]; got {:?}, {:?}, {:?}",
            pre.shape(),
            cl.shape(),
            cr.shape()
        )));
    }
    let (b, d) = (cl.shape()[0], cl.shape()[1]);
    if pre.shape() != [b, 5 * d] {
        return Err(Error::Tensor(format!(
            "lstm_gates: pre is {:?}, want [{b}, {}]",
            pre.shape(),
            5 * d
        )));
    }
    Ok((b, d))
}

/// Fused cell update; returns `(h, c)`.
pub fn lstm_gates(pre: &Tensor, cl: &Tensor, cr: &Tensor) -> Result<(Tensor, Tensor)> {
    let (h, c, _, _) = lstm_gates_inner(pre, cl, cr, false)?;
    Ok((h, c))
}

/// Fused cell update that also returns the activated gates `[b,5d]` and
/// `tanh(c)` `[b,d]` for the backward pass.
pub fn lstm_gates_train(
    pre: &Tensor,
    cl: &Tensor,
    cr: &Tensor,
) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let (h, c, g, tc) = lstm_gates_inner(pre, cl, cr, true)?;
    Ok((h, c, g.unwrap(), tc.unwrap()))
}

fn lstm_gates_inner(
    pre: &Tensor,
    cl: &Tensor,
    cr: &Tensor,
    save: bool,
) -> Result<(Tensor, Tensor, Option<Tensor>, Option<Tensor>)> {
    let (b, d) = lstm_dims(pre, cl, cr)?;
    let dt = pre.dtype();
    let mut h = Tensor::zeros(dt, &[b, d]);
    let mut c = Tensor::zeros(dt, &[b, d]);
    let mut gates = if save { Some(Tensor::zeros(dt, &[b, 5 * d])) } else { None };
    let mut tanh_c = if save { Some(Tensor::zeros(dt, &[b, d])) } else { None };
    match dt {
        DType::Float32 => lstm_fwd_impl(
            pre.as_f32()?,
            cl.as_f32()?,
            cr.as_f32()?,
            b,
            d,
            h.as_f32_mut()?,
            c.as_f32_mut()?,
            gates.as_mut().map(|t| t.as_f32_mut().unwrap()),
            tanh_c.as_mut().map(|t| t.as_f32_mut().unwrap()),
        ),
        DType::Float64 => lstm_fwd_impl(
            pre.as_f64()?,
            cl.as_f64()?,
            cr.as_f64()?,
            b,
            d,
            h.as_f64_mut()?,
            c.as_f64_mut()?,
            gates.as_mut().map(|t| t.as_f64_mut().unwrap()),
            tanh_c.as_mut().map(|t| t.as_f64_mut().unwrap()),
        ),
        DType::Int32 => unreachable!(),
    }
    Ok((h, c, gates, tanh_c))
}

#[allow(clippy::too_many_arguments)]
fn lstm_fwd_impl<T: Real>(
    pre: &[T],
    cl: &[T],
    cr: &[T],
    b: usize,
    d: usize,
    h: &mut [T],
    c: &mut [T],
    gates: Option<&mut [T]>,
    tanh_c: Option<&mut [T]>,
) {
    match (gates, tanh_c) {
        (Some(g), Some(t)) => {
            for row in 0..b {
                // Activate the gates in place in the saved buffer, then run
                // the cell update off it.
                let p = &pre[row * 5 * d..(row + 1) * 5 * d];
                let gr = &mut g[row * 5 * d..(row + 1) * 5 * d];
                for j in 0..4 * d {
                    gr[j] = p[j].sigmoid();
                }
                for j in 4 * d..5 * d {
                    gr[j] = p[j].tanh();
                }
                let (clr, crr) = (&cl[row * d..(row + 1) * d], &cr[row * d..(row + 1) * d]);
                let hr = &mut h[row * d..(row + 1) * d];
                let cc = &mut c[row * d..(row + 1) * d];
                let tr = &mut t[row * d..(row + 1) * d];
                for j in 0..d {
                    let cv = gr[j] * gr[4 * d + j] + gr[d + j] * clr[j] + gr[2 * d + j] * crr[j];
                    let tc = cv.tanh();
                    cc[j] = cv;
                    tr[j] = tc;
                    hr[j] = gr[3 * d + j] * tc;
                }
            }
        }
        _ => {
            for row in 0..b {
                let p = &pre[row * 5 * d..(row + 1) * 5 * d];
                let (ip, rest) = p.split_at(d);
                let (flp, rest) = rest.split_at(d);
                let (frp, rest) = rest.split_at(d);
                let (op, up) = rest.split_at(d);
                let (clr, crr) = (&cl[row * d..(row + 1) * d], &cr[row * d..(row + 1) * d]);
                let hr = &mut h[row * d..(row + 1) * d];
                let cc = &mut c[row * d..(row + 1) * d];
                for j in 0..d {
                    let cv = ip[j].sigmoid() * up[j].tanh()
                        + flp[j].sigmoid() * clr[j]
                        + frp[j].sigmoid() * crr[j];
                    let tc = cv.tanh();
                    cc[j] = cv;
                    hr[j] = op[j].sigmoid() * tc;
                }
            }
        }
    }
}

/// Fused backward of `lstm_gates`: from activated gates, `tanh(c)`, the
/// child cell states, and the output gradients, produces gradients for the
/// pre-activations and both child cell states.
pub fn lstm_gates_backward(
    gates: &Tensor,
    tanh_c: &Tensor,
    cl: &Tensor,
    cr: &Tensor,
    dh: &Tensor,
    dc: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, d) = lstm_dims(gates, cl, cr)?;
    want_same_shape(cl, dh, "lstm_gates_backward")?;
    want_same_shape(cl, dc, "lstm_gates_backward")?;
    want_same_shape(cl, tanh_c, "lstm_gates_backward")?;
    let dt = gates.dtype();
    let mut dpre = Tensor::zeros(dt, &[b, 5 * d]);
    let mut dcl = Tensor::zeros(dt, &[b, d]);
    let mut dcr = Tensor::zeros(dt, &[b, d]);
    match dt {
        DType::Float32 => lstm_bwd_impl(
            gates.as_f32()?,
            tanh_c.as_f32()?,
            cl.as_f32()?,
            cr.as_f32()?,
            dh.as_f32()?,
            dc.as_f32()?,
            b,
            d,
            dpre.as_f32_mut()?,
            dcl.as_f32_mut()?,
            dcr.as_f32_mut()?,
        ),
        DType::Float64 => lstm_bwd_impl(
            gates.as_f64()?,
            tanh_c.as_f64()?,
            cl.as_f64()?,
            cr.as_f64()?,
            dh.as_f64()?,
            dc.as_f64()?,
            b,
            d,
            dpre.as_f64_mut()?,
            dcl.as_f64_mut()?,
            dcr.as_f64_mut()?,
        ),
        DType::Int32 => unreachable!(),
    }
    Ok((dpre, dcl, dcr))
}

#[allow(clippy::too_many_arguments)]
fn lstm_bwd_impl<T: Real>(
    gates: &[T],
    tanh_c: &[T],
    cl: &[T],
    cr: &[T],
    dh: &[T],
    dc: &[T],
    b: usize,
    d: usize,
    dpre: &mut [T],
    dcl: &mut [T],
    dcr: &mut [T],
) {
    for row in 0..b {
        let g = &gates[row * 5 * d..(row + 1) * 5 * d];
        let dp = &mut dpre[row * 5 * d..(row + 1) * 5 * d];
        for j in 0..d {
            let at = row * d + j;
            let (i, fl, fr, o, u) = (g[j], g[d + j], g[2 * d + j], g[3 * d + j], g[4 * d + j]);
            let tc = tanh_c[at];
            let do_ = dh[at] * tc;
            let dct = dh[at] * o * (T::ONE - tc * tc) + dc[at];
            let di = dct * u;
            let du = dct * i;
            let dfl = dct * cl[at];
            let dfr = dct * cr[at];
            dcl[at] = dct * fl;
            dcr[at] = dct * fr;
            dp[j] = di * i * (T::ONE - i);
            dp[d + j] = dfl * fl * (T::ONE - fl);
            dp[2 * d + j] = dfr * fr * (T::ONE - fr);
            dp[3 * d + j] = do_ * o * (T::ONE - o);
            dp[4 * d + j] = du * (T::ONE - u * u);
        }
    }
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy
// ---------------------------------------------------------------------------

/// Numerically stable per-row sparse softmax cross-entropy.
/// `logits: [b,n]` float, `labels: [b]` i32 in `[0,n)`; returns `[b]` losses
/// in the logits dtype using natural log.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let (b, n) = xent_dims(logits, labels)?;
    let lab = labels.as_i32()?;
    let mut out = Tensor::zeros(logits.dtype(), &[b]);
    match logits.dtype() {
        DType::Float32 => xent_impl(logits.as_f32()?, lab, b, n, out.as_f32_mut()?)?,
        DType::Float64 => xent_impl(logits.as_f64()?, lab, b, n, out.as_f64_mut()?)?,
        DType::Int32 => unreachable!(),
    }
    Ok(out)
}

fn xent_dims(logits: &Tensor, labels: &Tensor) -> Result<(usize, usize)> {
    want_float(logits, "softmax_cross_entropy")?;
    if logits.rank() != 2 {
        return Err(Error::Tensor(format!(
            "softmax_cross_entropy wants logits [b,n], got {:?}",
            logits.shape()
        )));
    }
    if labels.dtype() != DType::Int32 || labels.rank() != 1 {
        return Err(Error::Tensor(format!(
            "softmax_cross_entropy wants i32 labels [b], got {} {:?}",
            labels.dtype(),
            labels.shape()
        )));
    }
    if labels.shape()[0] != logits.shape()[0] {
        return Err(Error::Tensor(format!(
            "softmax_cross_entropy: {} logit rows but {} labels",
            logits.shape()[0],
            labels.shape()[0]
        )));
    }
    Ok((logits.shape()[0], logits.shape()[1]))
}

fn xent_impl<T: Real>(logits: &[T], labels: &[i32], b: usize, n: usize, out: &mut [T]) -> Result<()> {
    for i in 0..b {
        let row = &logits[i * n..(i + 1) * n];
        let y = labels[i];
        if y < 0 || y as usize >= n {
            return Err(Error::Tensor(format!(
                "softmax_cross_entropy: label {y} out of range for {n} classes"
            )));
        }
        let mut m = row[0];
        for &v in &row[1..] {
            m = m.maxv(v);
        }
        let mut s = T::ZERO;
        for &v in row {
            s = s + (v - m).exp();
        }
        out[i] = s.ln() + m - row[y as usize];
    }
    Ok(())
}

/// Gradient of `softmax_cross_entropy` w.r.t. logits:
/// `(softmax(logits) - onehot(label)) * dloss`, per row.
pub fn softmax_cross_entropy_grad(
    logits: &Tensor,
    labels: &Tensor,
    dloss: &Tensor,
) -> Result<Tensor> {
    let (b, n) = xent_dims(logits, labels)?;
    if dloss.shape() != [b] {
        return Err(Error::Tensor(format!(
            "softmax_cross_entropy_grad: dloss shape {:?}, want [{b}]",
            dloss.shape()
        )));
    }
    want_same_dtype(logits, dloss, "softmax_cross_entropy_grad")?;
    let lab = labels.as_i32()?;
    let mut out = Tensor::zeros(logits.dtype(), &[b, n]);
    match logits.dtype() {
        DType::Float32 => {
            xent_grad_impl(logits.as_f32()?, lab, dloss.as_f32()?, b, n, out.as_f32_mut()?)
        }
        DType::Float64 => {
            xent_grad_impl(logits.as_f64()?, lab, dloss.as_f64()?, b, n, out.as_f64_mut()?)
        }
        DType::Int32 => unreachable!(),
    }
    Ok(out)
}

fn xent_grad_impl<T: Real>(
    logits: &[T],
    labels: &[i32],
    dloss: &[T],
    b: usize,
    n: usize,
    out: &mut [T],
) {
    for i in 0..b {
        let row = &logits[i * n..(i + 1) * n];
        let dst = &mut out[i * n..(i + 1) * n];
        let mut m = row[0];
        for &v in &row[1..] {
            m = m.maxv(v);
        }
        let mut s = T::ZERO;
        for (d, &v) in dst.iter_mut().zip(row) {
            let e = (v - m).exp();
            *d = e;
            s = s + e;
        }
        let g = dloss[i];
        for d in dst.iter_mut() {
            *d = *d / s * g;
        }
        dst[labels[i] as usize] = dst[labels[i] as usize] - g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_close, fd_grad, seeded_rng};
    use rand::Rng;

    fn t32(shape: &[usize], v: Vec<f32>) -> Tensor {
        Tensor::from_f32(shape, v).unwrap()
    }

    fn t64(shape: &[usize], v: Vec<f64>) -> Tensor {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn concat_rows_preserves_order() {
        let a = t32(&[2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let b = t32(&[4, 3], (7..19).map(|x| x as f32).collect());
        let c = concat_rows(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[6, 3]);
        assert_eq!(c.as_f32().unwrap()[..6], [1., 2., 3., 4., 5., 6.]);
        assert_eq!(c.as_f32().unwrap()[6..9], [7., 8., 9.]);
    }

    #[test]
    fn concat_rows_allows_empty_parts() {
        let e = Tensor::zeros(DType::Float32, &[0, 3]);
        let b = t32(&[2, 3], vec![1.; 6]);
        let c = concat_rows(&[&e, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
    }

    #[test]
    fn concat_rows_rejects_width_mismatch() {
        let a = Tensor::zeros(DType::Float32, &[2, 3]);
        let b = Tensor::zeros(DType::Float32, &[2, 4]);
        assert!(concat_rows(&[&a, &b]).is_err());
    }

    #[test]
    fn split_rows_inverts_concat() {
        let a = t32(&[2, 2], vec![1., 2., 3., 4.]);
        let b = t32(&[1, 2], vec![5., 6.]);
        let c = concat_rows(&[&a, &b]).unwrap();
        let parts = split_rows(&c, &[2, 1]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn gather_rows_reorders_and_duplicates() {
        let a = t32(&[3, 2], vec![0., 1., 10., 11., 20., 21.]);
        let g = gather_rows(&a, &[2, 0]).unwrap();
        assert_eq!(g.as_f32().unwrap(), &[20., 21., 0., 1.]);
        let d = gather_rows(&a, &[1, 1]).unwrap();
        assert_eq!(d.as_f32().unwrap(), &[10., 11., 10., 11.]);
        let e = gather_rows(&a, &[]).unwrap();
        assert_eq!(e.shape(), &[0, 2]);
        assert!(gather_rows(&a, &[3]).is_err());
    }

    #[test]
    fn scatter_add_accumulates_duplicates() {
        let src = t32(&[2, 2], vec![1., 2., 3., 4.]);
        let out = scatter_add_rows(&src, &[0, 0], 2).unwrap();
        assert_eq!(out.as_f32().unwrap(), &[4., 6., 0., 0.]);
        assert!(scatter_add_rows(&src, &[0, 2], 2).is_err());
    }

    #[test]
    fn gather_scatter_adjoint_pairing() {
        // <gather(x, idx), y> == <x, scatter_add(y, idx, n)> at f64.
        let mut rng = seeded_rng(7);
        for _ in 0..50 {
            let n = rng.gen_range(1..8usize);
            let w = rng.gen_range(1..5usize);
            let k = rng.gen_range(0..10usize);
            let x = t64(
                &[n, w],
                (0..n * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            );
            let y = t64(
                &[k, w],
                (0..k * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            );
            let idx: Vec<usize> = (0..k).map(|_| rng.gen_range(0..n)).collect();
            let gx = gather_rows(&x, &idx).unwrap();
            let sy = scatter_add_rows(&y, &idx, n).unwrap();
            let lhs: f64 = gx
                .as_f64()
                .unwrap()
                .iter()
                .zip(y.as_f64().unwrap())
                .map(|(a, b)| a * b)
                .sum();
            let rhs: f64 = x
                .as_f64()
                .unwrap()
                .iter()
                .zip(sy.as_f64().unwrap())
                .map(|(a, b)| a * b)
                .sum();
            assert_close(lhs, rhs, 1e-12);
        }
    }

    #[test]
    fn concat_split_cols_round_trip() {
        let a = t32(&[2, 1], vec![1., 4.]);
        let b = t32(&[2, 3], vec![2., 3., 5., 6., 7., 8.]);
        let cat = concat_cols(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[2, 4]);
        assert_eq!(cat.as_f32().unwrap(), &[1., 2., 3., 5., 4., 6., 7., 8.]);
        let parts = split_cols(&cat, &[1, 3]).unwrap();
        assert_eq!(parts[0].as_f32().unwrap(), a.as_f32().unwrap());
        assert_eq!(parts[1].as_f32().unwrap(), b.as_f32().unwrap());
        assert!(split_cols(&cat, &[2, 3]).is_err());
        let c = t32(&[3, 1], vec![0., 0., 0.]);
        assert!(concat_cols(&[&a, &c]).is_err());
    }

    #[test]
    fn matmul_small_cases() {
        let a = t32(&[1, 2], vec![1., 2.]);
        let b = t32(&[2, 1], vec![1., 1.]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.as_f32().unwrap(), &[3.]);

        let x = t32(&[2, 2], vec![1., 2., 3., 4.]);
        let eye = t32(&[2, 2], vec![1., 0., 0., 1.]);
        assert_eq!(matmul(&x, &eye).unwrap(), x);
        assert!(matmul(&x, &a).is_err());
    }

    #[test]
    fn matmul_batched_rows_are_bit_identical_to_single_rows() {
        // 13 rows exercises a full 8-row block plus a 5-row remainder, and
        // width 37 exercises the column tail. Every row must come out
        // bit-identical to a batch-of-one matmul of that row.
        let mut rng = seeded_rng(3);
        let (n, k, m) = (13usize, 9usize, 37usize);
        let a = t32(&[n, k], (0..n * k).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let b = t32(&[k, m], (0..k * m).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let all = matmul(&a, &b).unwrap();
        for i in 0..n {
            let row = gather_rows(&a, &[i]).unwrap();
            let one = matmul(&row, &b).unwrap();
            assert_eq!(
                one.as_f32().unwrap(),
                &all.as_f32().unwrap()[i * m..(i + 1) * m]
            );
        }
    }

    #[test]
    fn matmul_acc_accumulates_into_existing_output() {
        let a = t32(&[1, 2], vec![1., 2.]);
        let b = t32(&[2, 3], vec![1., 0., 0., 0., 1., 0.]);
        let mut out = t32(&[1, 3], vec![10., 10., 10.]);
        matmul_acc(&a, &b, &mut out).unwrap();
        assert_eq!(out.as_f32().unwrap(), &[11., 12., 10.]);
        let mut bad = Tensor::zeros(DType::Float32, &[2, 3]);
        assert!(matmul_acc(&a, &b, &mut bad).is_err());
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = seeded_rng(11);
        let (n, k, m) = (3, 4, 2);
        let a0: Vec<f64> = (0..n * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b0: Vec<f64> = (0..k * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..n * m).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let loss = |av: &[f64], bv: &[f64]| -> f64 {
            let y = matmul(
                &t64(&[n, k], av.to_vec()),
                &t64(&[k, m], bv.to_vec()),
            )
            .unwrap();
            y.as_f64().unwrap().iter().zip(&w).map(|(a, b)| a * b).sum()
        };

        let dy = t64(&[n, m], w.clone());
        let da = matmul_grad_lhs(&dy, &t64(&[k, m], b0.clone())).unwrap();
        let db = matmul_grad_rhs(&t64(&[n, k], a0.clone()), &dy).unwrap();

        let fd_a = fd_grad(&mut |x| loss(x, &b0), &a0);
        let fd_b = fd_grad(&mut |x| loss(&a0, x), &b0);
        for (g, f) in da.as_f64().unwrap().iter().zip(&fd_a) {
            assert_close(*g, *f, 1e-6);
        }
        for (g, f) in db.as_f64().unwrap().iter().zip(&fd_b) {
            assert_close(*g, *f, 1e-6);
        }
    }

    #[test]
    fn ew_binary_basics() {
        let a = t32(&[2], vec![1., 4.]);
        let z = Tensor::zeros(DType::Float32, &[2]);
        assert_eq!(ew_binary(BinaryOp::Add, &a, &z).unwrap(), a);
        let b = t32(&[2], vec![2., 8.]);
        let d = ew_binary(BinaryOp::Div, &a, &b).unwrap();
        assert_eq!(d.as_f32().unwrap(), &[0.5, 0.5]);
        let bad = Tensor::zeros(DType::Float32, &[3]);
        assert!(ew_binary(BinaryOp::Add, &a, &bad).is_err());
    }

    #[test]
    fn ew_binary_gradients_match_finite_differences() {
        let mut rng = seeded_rng(5);
        for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div, BinaryOp::Max] {
            let a0: Vec<f64> = (0..6).map(|_| rng.gen_range(0.5..2.0)).collect();
            let b0: Vec<f64> = (0..6).map(|_| rng.gen_range(0.5..2.0)).collect();
            let w: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let loss = |av: &[f64], bv: &[f64]| -> f64 {
                let y = ew_binary(op, &t64(&[6], av.to_vec()), &t64(&[6], bv.to_vec())).unwrap();
                y.as_f64().unwrap().iter().zip(&w).map(|(a, b)| a * b).sum()
            };
            let dy = t64(&[6], w.clone());
            let (da, db) =
                ew_binary_grads(op, &t64(&[6], a0.clone()), &t64(&[6], b0.clone()), &dy).unwrap();
            let fd_a = fd_grad(&mut |x| loss(x, &b0), &a0);
            let fd_b = fd_grad(&mut |x| loss(&a0, x), &b0);
            for (g, f) in da.as_f64().unwrap().iter().zip(&fd_a) {
                assert_close(*g, *f, 1e-6);
            }
            for (g, f) in db.as_f64().unwrap().iter().zip(&fd_b) {
                assert_close(*g, *f, 1e-6);
            }
        }
    }

    #[test]
    fn ew_unary_basics() {
        let z = Tensor::zeros(DType::Float32, &[3]);
        let e = ew_unary(UnaryOp::Exp, &z).unwrap();
        assert_eq!(e.as_f32().unwrap(), &[1., 1., 1.]);
        let r = ew_unary(UnaryOp::Relu, &t32(&[2], vec![-1., 2.])).unwrap();
        assert_eq!(r.as_f32().unwrap(), &[0., 2.]);
        let s = ew_unary(UnaryOp::Sigmoid, &Tensor::zeros(DType::Float32, &[1])).unwrap();
        assert_eq!(s.as_f32().unwrap(), &[0.5]);
        let t = ew_unary(UnaryOp::Tanh, &Tensor::zeros(DType::Float32, &[1])).unwrap();
        assert_eq!(t.as_f32().unwrap(), &[0.0]);
    }

    #[test]
    fn ew_unary_gradients_match_finite_differences() {
        let mut rng = seeded_rng(13);
        for op in [UnaryOp::Exp, UnaryOp::Tanh, UnaryOp::Sigmoid, UnaryOp::Relu, UnaryOp::Neg] {
            let x0: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let w: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let loss = |xv: &[f64]| -> f64 {
                let y = ew_unary(op, &t64(&[8], xv.to_vec())).unwrap();
                y.as_f64().unwrap().iter().zip(&w).map(|(a, b)| a * b).sum()
            };
            let x = t64(&[8], x0.clone());
            let y = ew_unary(op, &x).unwrap();
            let dx = ew_unary_grad(op, &x, &y, &t64(&[8], w.clone())).unwrap();
            let fd = fd_grad(&mut loss.clone(), &x0);
            for (g, f) in dx.as_f64().unwrap().iter().zip(&fd) {
                assert_close(*g, *f, 1e-6);
            }
        }
    }

    #[test]
    fn fast_f32_math_tracks_f64_reference() {
        // Compare against the f64 functions evaluated at the exact f32
        // argument, so the check isolates approximation error from input
        // quantization.
        let mut worst = 0.0f64;
        let mut x = -20.0f64;
        while x <= 20.0 {
            let xf = x as f32;
            let xd = xf as f64;
            let e = fastmath::exp_f32(xf) as f64;
            let r = xd.exp();
            worst = worst.max(((e - r) / r).abs());
            let t = fastmath::tanh_f32(xf) as f64;
            let rt = xd.tanh();
            if rt.abs() > 1e-8 {
                worst = worst.max(((t - rt) / rt).abs());
            }
            let s = fastmath::sigmoid_f32(xf) as f64;
            let rs = 1.0 / (1.0 + (-xd).exp());
            worst = worst.max(((s - rs) / rs).abs());
            x += 0.00137;
        }
        assert!(worst < 1e-6, "fast math rel err {worst}");
    }

    #[test]
    fn reduce_sum_examples() {
        let ones = t32(&[2, 3], vec![1.; 6]);
        let r1 = reduce_sum(&ones, 1).unwrap();
        assert_eq!(r1.shape(), &[2]);
        assert_eq!(r1.as_f32().unwrap(), &[3., 3.]);
        let r0 = reduce_sum(&ones, 0).unwrap();
        assert_eq!(r0.as_f32().unwrap(), &[2., 2., 2.]);
        // A size-1 axis sums to the same values with the axis squeezed away.
        let col = t32(&[3, 1], vec![1., 2., 3.]);
        let sq = reduce_sum(&col, 1).unwrap();
        assert_eq!(sq.shape(), &[3]);
        assert_eq!(sq.as_f32().unwrap(), &[1., 2., 3.]);
        assert!(reduce_sum(&ones, 2).is_err());
    }

    #[test]
    fn reduce_sum_axis0_is_permutation_invariant_at_f64() {
        let mut rng = seeded_rng(17);
        let v: Vec<f64> = (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = t64(&[10, 4], v);
        let base = reduce_sum(&t, 0).unwrap();
        let perm: Vec<usize> = vec![9, 3, 5, 0, 7, 1, 8, 2, 6, 4];
        let shuffled = gather_rows(&t, &perm).unwrap();
        let other = reduce_sum(&shuffled, 0).unwrap();
        for (a, b) in base.as_f64().unwrap().iter().zip(other.as_f64().unwrap()) {
            assert_close(*a, *b, 1e-12);
        }
    }

    #[test]
    fn reduce_sum_grad_spreads() {
        let dy = t32(&[2], vec![1., 2.]);
        let g = reduce_sum_grad(&dy, &[2, 3], 1).unwrap();
        assert_eq!(g.as_f32().unwrap(), &[1., 1., 1., 2., 2., 2.]);
    }

    #[test]
    fn bias_rows_replicates() {
        let b = t32(&[3], vec![1., 2., 3.]);
        let t = bias_rows(&b, 2).unwrap();
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.as_f32().unwrap(), &[1., 2., 3., 1., 2., 3.]);
    }

    #[test]
    fn lstm_gates_train_agrees_with_infer_path() {
        let mut rng = seeded_rng(43);
        let (b, d) = (5usize, 8usize);
        let pre = t32(
            &[b, 5 * d],
            (0..b * 5 * d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        );
        let cl = t32(&[b, d], (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let cr = t32(&[b, d], (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let (h1, c1) = lstm_gates(&pre, &cl, &cr).unwrap();
        let (h2, c2, _, _) = lstm_gates_train(&pre, &cl, &cr).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(c1, c2);
    }

    #[test]
    fn tile_and_sum_cols_are_adjoint() {
        let t = t32(&[2, 1], vec![3., 4.]);
        let tiled = tile_cols(&t, 3).unwrap();
        assert_eq!(tiled.as_f32().unwrap(), &[3., 3., 3., 4., 4., 4.]);
        let back = sum_cols(&tiled).unwrap();
        assert_eq!(back.as_f32().unwrap(), &[9., 12.]);
    }

    #[test]
    fn softmax_cross_entropy_uniform_logits() {
        // Equal logits over n classes lose ln(n) regardless of the label.
        let logits = t64(&[1, 4], vec![0.7; 4]);
        let labels = Tensor::from_i32(&[1], vec![2]).unwrap();
        let loss = softmax_cross_entropy(&logits, &labels).unwrap();
        assert_close(loss.as_f64().unwrap()[0], (4.0f64).ln(), 1e-12);
    }

    #[test]
    fn softmax_cross_entropy_two_class_closed_form() {
        // For logits [10,-10] with label 0 the loss is log(1+e^-20); the
        // frozen value comes from f64 log1p.
        let logits = t64(&[1, 2], vec![10.0, -10.0]);
        let labels = Tensor::from_i32(&[1], vec![0]).unwrap();
        let loss = softmax_cross_entropy(&logits, &labels).unwrap();
        assert_close(loss.as_f64().unwrap()[0], 2.0611536181902037e-9, 1e-6);
    }

    #[test]
    fn softmax_cross_entropy_rejects_bad_labels() {
        let logits = Tensor::zeros(DType::Float32, &[1, 3]);
        let labels = Tensor::from_i32(&[1], vec![3]).unwrap();
        assert!(softmax_cross_entropy(&logits, &labels).is_err());
        let neg = Tensor::from_i32(&[1], vec![-1]).unwrap();
        assert!(softmax_cross_entropy(&logits, &neg).is_err());
    }

    #[test]
    fn softmax_cross_entropy_grad_rows_sum_to_zero() {
        let mut rng = seeded_rng(23);
        let logits = t64(&[3, 5], (0..15).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let labels = Tensor::from_i32(&[3], vec![0, 4, 2]).unwrap();
        let dloss = t64(&[3], vec![1., 1., 1.]);
        let g = softmax_cross_entropy_grad(&logits, &labels, &dloss).unwrap();
        for i in 0..3 {
            let s: f64 = g.as_f64().unwrap()[i * 5..(i + 1) * 5].iter().sum();
            assert_close(s, 0.0, 1e-12);
        }
    }

    #[test]
    fn softmax_cross_entropy_grad_matches_finite_differences() {
        let mut rng = seeded_rng(29);
        let l0: Vec<f64> = (0..10).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let labels = Tensor::from_i32(&[2], vec![1, 3]).unwrap();
        let loss = |lv: &[f64]| -> f64 {
            softmax_cross_entropy(&t64(&[2, 5], lv.to_vec()), &labels)
                .unwrap()
                .as_f64()
                .unwrap()
                .iter()
                .sum()
        };
        let dloss = t64(&[2], vec![1., 1.]);
        let g = softmax_cross_entropy_grad(&t64(&[2, 5], l0.clone()), &labels, &dloss).unwrap();
        let fd = fd_grad(&mut loss.clone(), &l0);
        for (a, b) in g.as_f64().unwrap().iter().zip(&fd) {
            assert_close(*a, *b, 1e-6);
        }
    }

    #[test]
    fn lstm_gates_match_scalar_oracle() {
        let mut rng = seeded_rng(37);
        let (b, d) = (3usize, 4usize);
        let pre: Vec<f64> = (0..b * 5 * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let clv: Vec<f64> = (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let crv: Vec<f64> = (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (h, c) = lstm_gates(
            &t64(&[b, 5 * d], pre.clone()),
            &t64(&[b, d], clv.clone()),
            &t64(&[b, d], crv.clone()),
        )
        .unwrap();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        for row in 0..b {
            for j in 0..d {
                let p = &pre[row * 5 * d..(row + 1) * 5 * d];
                let (i, fl, fr, o, u) = (
                    sig(p[j]),
                    sig(p[d + j]),
                    sig(p[2 * d + j]),
                    sig(p[3 * d + j]),
                    p[4 * d + j].tanh(),
                );
                let cv = i * u + fl * clv[row * d + j] + fr * crv[row * d + j];
                assert_close(c.as_f64().unwrap()[row * d + j], cv, 1e-12);
                assert_close(h.as_f64().unwrap()[row * d + j], o * cv.tanh(), 1e-12);
            }
        }
    }

    #[test]
    fn lstm_gates_backward_matches_finite_differences() {
        let mut rng = seeded_rng(41);
        let (b, d) = (2usize, 3usize);
        let pre0: Vec<f64> = (0..b * 5 * d).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let cl0: Vec<f64> = (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cr0: Vec<f64> = (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wh: Vec<f64> = (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wc: Vec<f64> = (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let loss = |pv: &[f64], clv: &[f64], crv: &[f64]| -> f64 {
            let (h, c) = lstm_gates(
                &t64(&[b, 5 * d], pv.to_vec()),
                &t64(&[b, d], clv.to_vec()),
                &t64(&[b, d], crv.to_vec()),
            )
            .unwrap();
            let hs: f64 = h.as_f64().unwrap().iter().zip(&wh).map(|(a, w)| a * w).sum();
            let cs: f64 = c.as_f64().unwrap().iter().zip(&wc).map(|(a, w)| a * w).sum();
            hs + cs
        };

        let (_, _, gates, tanh_c) = lstm_gates_train(
            &t64(&[b, 5 * d], pre0.clone()),
            &t64(&[b, d], cl0.clone()),
            &t64(&[b, d], cr0.clone()),
        )
        .unwrap();
        let (dpre, dcl, dcr) = lstm_gates_backward(
            &gates,
            &tanh_c,
            &t64(&[b, d], cl0.clone()),
            &t64(&[b, d], cr0.clone()),
            &t64(&[b, d], wh.clone()),
            &t64(&[b, d], wc.clone()),
        )
        .unwrap();

        let fd_pre = fd_grad(&mut |x| loss(x, &cl0, &cr0), &pre0);
        let fd_cl = fd_grad(&mut |x| loss(&pre0, x, &cr0), &cl0);
        let fd_cr = fd_grad(&mut |x| loss(&pre0, &cl0, x), &cr0);
        for (g, f) in dpre.as_f64().unwrap().iter().zip(&fd_pre) {
            assert_close(*g, *f, 1e-6);
        }
        for (g, f) in dcl.as_f64().unwrap().iter().zip(&fd_cl) {
            assert_close(*g, *f, 1e-6);
        }
        for (g, f) in dcr.as_f64().unwrap().iter().zip(&fd_cr) {
            assert_close(*g, *f, 1e-6);
        }
    }

    #[test]
    fn kernels_are_pure_and_deterministic() {
        let mut rng = seeded_rng(31);
        let a = t32(&[4, 3], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let b = t32(&[3, 5], (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let snapshot = a.clone();
        let y1 = matmul(&a, &b).unwrap();
        let y2 = matmul(&a, &b).unwrap();
        assert_eq!(y1, y2);
        assert_eq!(a, snapshot);
    }
}
