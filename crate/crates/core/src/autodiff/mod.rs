//! Reverse-mode automatic differentiation over dense `f64` tensors, the
//! operator set of a small encoder-decoder transformer, and Adam.

mod adam;
mod gemm;
mod gradcheck;
mod graph;
mod tensor;

pub use adam::{clip_global_norm, AdamConfig, AdamState};
pub use gradcheck::{finite_diff_check, finite_diff_check_many};
pub use graph::{sigmoid, AttentionSpec, Gradients, Graph, OpKind, TapeNode, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("shape {shape:?} does not describe {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
}
