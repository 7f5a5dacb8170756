//! Static types for block edges.
//!
//! A `TensorType` is a dtype plus the per-item shape, excluding the batch
//! dimension: a batch of `f32[3]` values flows through kernels as a tensor
//! of shape `[b, 3]`. `BlockType` adds the structural types the combinator
//! layer needs: host values (`Input`), tuples, sequences, and `Void` for
//! blocks that consume nothing.

use std::fmt;

use crate::tensor::DType;

/// Dtype plus item shape (no batch dimension).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorType {
    pub dtype: DType,
    pub shape: Vec<usize>,
}

impl TensorType {
    pub fn new(dtype: DType, shape: &[usize]) -> TensorType {
        TensorType { dtype, shape: shape.to_vec() }
    }

    pub fn f32(shape: &[usize]) -> TensorType {
        TensorType::new(DType::Float32, shape)
    }

    pub fn f64(shape: &[usize]) -> TensorType {
        TensorType::new(DType::Float64, shape)
    }

    pub fn i32(shape: &[usize]) -> TensorType {
        TensorType::new(DType::Int32, shape)
    }

    /// Element count of one item (1 for scalars).
    pub fn item_len(&self) -> usize {
        self.shape.iter().product()
    }

    /// The shape of a batch of `rows` items.
    pub fn batched_shape(&self, rows: usize) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.shape.len() + 1);
        s.push(rows);
        s.extend_from_slice(&self.shape);
        s
    }
}

impl fmt::Display for TensorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[", self.dtype)?;
        for (i, d) in self.shape.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

/// The type of a block edge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BlockType {
    /// An opaque host value, not yet a tensor.
    Input,
    /// No value; the input type of pure sources like `zeros`.
    Void,
    Tensor(TensorType),
    Tuple(Vec<BlockType>),
    Seq(Box<BlockType>),
}

impl BlockType {
    pub fn tensor(dtype: DType, shape: &[usize]) -> BlockType {
        BlockType::Tensor(TensorType::new(dtype, shape))
    }

    pub fn seq(t: BlockType) -> BlockType {
        BlockType::Seq(Box::new(t))
    }

    pub fn tuple(ts: Vec<BlockType>) -> BlockType {
        BlockType::Tuple(ts)
    }

    /// Flattens nested tuples into the sequence of leaf tensor types.
    /// Returns None if any leaf is not a tensor (Input/Void/Seq).
    pub fn flatten_tensors(&self) -> Option<Vec<TensorType>> {
        let mut out = Vec::new();
        fn walk(t: &BlockType, out: &mut Vec<TensorType>) -> bool {
            match t {
                BlockType::Tensor(tt) => {
                    out.push(tt.clone());
                    true
                }
                BlockType::Tuple(ts) => ts.iter().all(|t| walk(t, out)),
                _ => false,
            }
        }
        if walk(self, &mut out) {
            Some(out)
        } else {
            None
        }
    }

    /// True if the type contains no Input or Seq component, i.e. it can be
    /// represented as a fixed set of tensors (used by zeros-producing
    /// blocks).
    pub fn is_tensor_only(&self) -> bool {
        match self {
            BlockType::Tensor(_) => true,
            BlockType::Tuple(ts) => ts.iter().all(|t| t.is_tensor_only()),
            _ => false,
        }
    }
}

impl fmt::Display for BlockType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockType::Input => write!(f, "input"),
            BlockType::Void => write!(f, "void"),
            BlockType::Tensor(t) => write!(f, "{t}"),
            BlockType::Tuple(ts) => {
                write!(f, "(")?;
                for (i, t) in ts.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{t}")?;
                }
                write!(f, ")")
            }
            BlockType::Seq(t) => write!(f, "seq<{t}>"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pretty_printing_grammar() {
        assert_eq!(TensorType::f32(&[2, 3]).to_string(), "f32[2,3]");
        assert_eq!(TensorType::i32(&[]).to_string(), "i32[]");
        let t = BlockType::tuple(vec![
            BlockType::tensor(DType::Float32, &[4]),
            BlockType::seq(BlockType::tensor(DType::Int32, &[])),
        ]);
        assert_eq!(t.to_string(), "(f32[4], seq<i32[]>)");
        assert_eq!(BlockType::Input.to_string(), "input");
        assert_eq!(BlockType::Void.to_string(), "void");
    }

    #[test]
    fn equality_is_structural() {
        assert_eq!(TensorType::f32(&[3]), TensorType::f32(&[3]));
        assert_ne!(
            BlockType::seq(BlockType::tensor(DType::Float32, &[3])),
            BlockType::tensor(DType::Float32, &[3])
        );
        let one = BlockType::tuple(vec![BlockType::tensor(DType::Float32, &[3])]);
        assert_ne!(one, BlockType::tensor(DType::Float32, &[3]));
    }

    #[test]
    fn flatten_tensors_walks_nested_tuples() {
        let t = BlockType::tuple(vec![
            BlockType::tensor(DType::Float32, &[2]),
            BlockType::tuple(vec![
                BlockType::tensor(DType::Float32, &[3]),
                BlockType::tensor(DType::Int32, &[]),
            ]),
        ]);
        let flat = t.flatten_tensors().unwrap();
        assert_eq!(flat.len(), 3);
        assert_eq!(flat[1], TensorType::f32(&[3]));
        assert!(BlockType::seq(BlockType::Input).flatten_tensors().is_none());
    }

    #[test]
    fn batched_shape_prepends_rows() {
        assert_eq!(TensorType::f32(&[3, 4]).batched_shape(7), vec![7, 3, 4]);
        assert_eq!(TensorType::i32(&[]).batched_shape(2), vec![2]);
        assert_eq!(TensorType::i32(&[]).item_len(), 1);
    }
}
