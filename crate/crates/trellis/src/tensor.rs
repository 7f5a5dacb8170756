//! Dense tensors: row-major flat buffers tagged with a dtype.
//!
//! The leading axis is the batch (row) axis wherever tensors are batched;
//! a tensor of logical item shape `[3]` batched over `b` examples has shape
//! `[b, 3]`. Kernels never broadcast implicitly and never mutate their
//! inputs; shape agreement is always the caller's job.

use crate::error::{Error, Result};
use std::fmt;

/// Element type of a tensor. `Int32` participates in lookups and labels
/// only; it never appears on a gradient path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DType {
    Float32,
    Float64,
    Int32,
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::Float32 => "f32",
            DType::Float64 => "f64",
            DType::Int32 => "i32",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Data {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
}

/// A dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Data,
}

fn elem_count(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn zeros(dtype: DType, shape: &[usize]) -> Tensor {
        let n = elem_count(shape);
        let data = match dtype {
            DType::Float32 => Data::F32(vec![0.0; n]),
            DType::Float64 => Data::F64(vec![0.0; n]),
            DType::Int32 => Data::I32(vec![0; n]),
        };
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn from_f32(shape: &[usize], values: Vec<f32>) -> Result<Tensor> {
        check_len(shape, values.len())?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Data::F32(values),
        })
    }

    pub fn from_f64(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        check_len(shape, values.len())?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Data::F64(values),
        })
    }

    pub fn from_i32(shape: &[usize], values: Vec<i32>) -> Result<Tensor> {
        check_len(shape, values.len())?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Data::I32(values),
        })
    }

    /// Rank-0 scalar constructors.
    pub fn scalar_f32(v: f32) -> Tensor {
        Tensor {
            shape: vec![],
            data: Data::F32(vec![v]),
        }
    }

    pub fn scalar_f64(v: f64) -> Tensor {
        Tensor {
            shape: vec![],
            data: Data::F64(vec![v]),
        }
    }

    pub fn scalar_i32(v: i32) -> Tensor {
        Tensor {
            shape: vec![],
            data: Data::I32(vec![v]),
        }
    }

    /// A float tensor of the given dtype from f64 values (handy for code
    /// that is generic over the two float widths).
    pub fn from_f64_values(dtype: DType, shape: &[usize], values: &[f64]) -> Result<Tensor> {
        match dtype {
            DType::Float32 => Tensor::from_f32(shape, values.iter().map(|&v| v as f32).collect()),
            DType::Float64 => Tensor::from_f64(shape, values.to_vec()),
            DType::Int32 => Err(Error::Tensor(
                "from_f64_values requires a float dtype".into(),
            )),
        }
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            Data::F32(_) => DType::Float32,
            Data::F64(_) => DType::Float64,
            Data::I32(_) => DType::Int32,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        elem_count(&self.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of rows along the leading axis (1 for rank-0 scalars).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Elements per row along the leading axis.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            Data::F32(v) => Ok(v),
            _ => Err(self.dtype_error(DType::Float32)),
        }
    }

    pub fn as_f64(&self) -> Result<&[f64]> {
        match &self.data {
            Data::F64(v) => Ok(v),
            _ => Err(self.dtype_error(DType::Float64)),
        }
    }

    pub fn as_i32(&self) -> Result<&[i32]> {
        match &self.data {
            Data::I32(v) => Ok(v),
            _ => Err(self.dtype_error(DType::Int32)),
        }
    }

    pub fn as_f32_mut(&mut self) -> Result<&mut [f32]> {
        let err = self.dtype_error(DType::Float32);
        match &mut self.data {
            Data::F32(v) => Ok(v),
            _ => Err(err),
        }
    }

    pub fn as_f64_mut(&mut self) -> Result<&mut [f64]> {
        let err = self.dtype_error(DType::Float64);
        match &mut self.data {
            Data::F64(v) => Ok(v),
            _ => Err(err),
        }
    }

    pub fn as_i32_mut(&mut self) -> Result<&mut [i32]> {
        let err = self.dtype_error(DType::Int32);
        match &mut self.data {
            Data::I32(v) => Ok(v),
            _ => Err(err),
        }
    }

    fn dtype_error(&self, want: DType) -> Error {
        Error::Tensor(format!("expected dtype {}, found {}", want, self.dtype()))
    }

    /// Same buffer under a new shape with an equal element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Tensor> {
        if elem_count(shape) != self.len() {
            return Err(Error::Tensor(format!(
                "cannot reshape {:?} ({} elems) to {:?} ({} elems)",
                self.shape,
                self.len(),
                shape,
                elem_count(shape)
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Copies one row along the leading axis out as a tensor of the item
    /// shape (the leading axis dropped).
    pub fn row(&self, i: usize) -> Result<Tensor> {
        if self.rank() == 0 {
            return Err(Error::Tensor("row() on a rank-0 tensor".into()));
        }
        if i >= self.rows() {
            return Err(Error::Tensor(format!(
                "row index {} out of range for {} rows",
                i,
                self.rows()
            )));
        }
        let w = self.row_len();
        let item_shape: Vec<usize> = self.shape[1..].to_vec();
        let data = match &self.data {
            Data::F32(v) => Data::F32(v[i * w..(i + 1) * w].to_vec()),
            Data::F64(v) => Data::F64(v[i * w..(i + 1) * w].to_vec()),
            Data::I32(v) => Data::I32(v[i * w..(i + 1) * w].to_vec()),
        };
        Ok(Tensor {
            shape: item_shape,
            data,
        })
    }

    /// All values widened to f64, in row-major order.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            Data::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Data::F64(v) => v.clone(),
            Data::I32(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

fn check_len(shape: &[usize], len: usize) -> Result<()> {
    if elem_count(shape) != len {
        return Err(Error::Tensor(format!(
            "shape {:?} wants {} elements, got {}",
            shape,
            elem_count(shape),
            len
        )));
    }
    Ok(())
}

impl fmt::Display for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{:?}", self.dtype(), self.shape)
    }
}

/// Largest relative elementwise error between two tensors of equal dtype and
/// shape, with an absolute floor so near-zero entries compare absolutely.
pub fn max_rel_err(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Tensor(format!(
            "rel_err shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let av = a.to_f64_vec();
    let bv = b.to_f64_vec();
    let mut worst = 0.0f64;
    for (x, y) in av.iter().zip(&bv) {
        let denom = x.abs().max(y.abs()).max(1e-12);
        let err = (x - y).abs() / denom;
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructors_check_lengths() {
        assert!(Tensor::from_f32(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_f32(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn rows_and_row_len() {
        let t = Tensor::zeros(DType::Float32, &[4, 3]);
        assert_eq!(t.rows(), 4);
        assert_eq!(t.row_len(), 3);
        let s = Tensor::scalar_f32(1.0);
        assert_eq!(s.rows(), 1);
        assert_eq!(s.row_len(), 1);
    }

    #[test]
    fn row_extraction() {
        let t = Tensor::from_f32(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = t.row(1).unwrap();
        assert_eq!(r.shape(), &[2]);
        assert_eq!(r.as_f32().unwrap(), &[3.0, 4.0]);
        assert!(t.row(2).is_err());
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::from_i32(&[4], vec![1, 2, 3, 4]).unwrap();
        let r = t.reshape(&[2, 2]).unwrap();
        assert_eq!(r.shape(), &[2, 2]);
        assert_eq!(r.as_i32().unwrap(), &[1, 2, 3, 4]);
    }

    #[test]
    fn dtype_access_is_checked() {
        let t = Tensor::zeros(DType::Float64, &[1]);
        assert!(t.as_f32().is_err());
        assert!(t.as_f64().is_ok());
    }
}
