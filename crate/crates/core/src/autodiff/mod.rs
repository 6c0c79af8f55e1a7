//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records operations eagerly; [`Graph::backward`] replays the
//! tape in reverse. The operator set is exactly what the residual classifier
//! and the losses need.

mod gemm;
mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{finite_difference_check, relative_error, Coordinates, GradCheckReport, REL_ERROR_FLOOR};
pub use graph::{
    softmax_in_place, BatchNormMode, ChannelStats, Gradients, Graph, RunningStats, Var, Window,
    BN_EPS, BN_MOMENTUM,
};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: invalid input shape {shape:?}, expected {expected}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        expected: &'static str,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

#[cfg(test)]
mod tests;
