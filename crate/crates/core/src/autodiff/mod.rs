//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Forward values are computed eagerly and every node keeps its parents, so
//! a gradient computed with `create_graph = true` is itself a graph that can
//! be differentiated again. Broadcasting is limited to a vector against the
//! last axis of a matrix. Any op that produces a NaN or infinity fails with
//! [`AutodiffError::NonFinite`] instead of storing it.

mod backward;
mod tensor;
mod var;

pub use backward::{grad, grad_tensors};
pub use tensor::Tensor;
pub use var::{grad_enabled, no_grad, tensor_op, NoGradGuard, OpKind, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: OpKind, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: unsupported shape {shape:?}, expected {expected}")]
    InvalidShape { op: OpKind, shape: Vec<usize>, expected: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: OpKind },
    #[error("gradient output must be a scalar, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("{op}: expected {expected} operands, got {got}")]
    Arity { op: OpKind, expected: usize, got: usize },
    #[error("{op}: needs at least one operand")]
    EmptyOperands { op: OpKind },
    #[error("{op}: takes a parameter; call the Var method directly")]
    NeedsArgument { op: OpKind },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
