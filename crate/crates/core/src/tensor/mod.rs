//! Dense 2-D tensors with reverse-mode automatic differentiation.
//!
//! [`Mat`] holds plain values. A [`Graph`] records every operation applied
//! to [`Tensor`] handles during a forward pass; [`Tensor::backward`] then
//! walks the record in reverse and leaves `∂loss/∂node` on every node that
//! requires a gradient. Shapes are explicit: apart from scalar scaling the
//! only broadcasts are the named row-bias and row-scaling ops.
//!
//! [`gradcheck`] provides the central-difference oracle used throughout
//! the test suite.

mod graph;
mod mat;

pub mod gradcheck;

pub use graph::{Axis, Graph, NodeId, ReduceKind, Tensor};
pub use mat::Mat;

use thiserror::Error;

/// Norm floor below which a vector is treated as degenerate.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("data of length {len} cannot fill a {rows}x{cols} matrix")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("{op}: input outside domain ({detail})")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: degenerate vector at row {row} (norm {norm:e})")]
    Degenerate {
        op: &'static str,
        row: usize,
        norm: f64,
    },
    #[error("{op}: expected a row vector, got shape {shape:?}")]
    NotVector {
        op: &'static str,
        shape: (usize, usize),
    },
    #[error("backward needs a scalar loss, got a {rows}x{cols} tensor")]
    NotScalar { rows: usize, cols: usize },
}
