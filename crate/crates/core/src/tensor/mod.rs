//! Reverse-mode autodiff on a dynamic tape.
//!
//! A `Graph` owns a flat tape of nodes; `Tensor` is a cheap handle into it.
//! Recording an op appends a node whose inputs are earlier indices, so tape
//! order is already topological and backward is a single reverse sweep.
//! Gradients accumulate on `param` leaves until explicitly cleared.
//!
//! Scope limits worth knowing: broadcasting exists only between a rank-0
//! scalar and another tensor (row and channel alignment have dedicated ops
//! instead), and the tape differentiates scalar roots only, once per value;
//! higher-order derivatives are out of scope.

mod array;
mod finite_diff;
mod graph;

pub use array::Array;
pub use finite_diff::{finite_diff_check, FiniteDiffReport};
pub use graph::{Graph, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape: {detail}")]
    InvalidShape { op: &'static str, detail: String },
    #[error("backward needs a rank-0 root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("{op}: operands recorded on different graphs")]
    GraphMismatch { op: &'static str },
    #[error("{op}: argument {value} outside domain")]
    Domain { op: &'static str, value: f64 },
}
