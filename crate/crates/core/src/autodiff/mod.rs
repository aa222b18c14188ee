//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! A [`Tape`] records each operation as it is evaluated. Calling
//! [`Tape::backward`] on a scalar walks the record in reverse and returns
//! gradients for every node that requires one. Learnable weights live in a
//! [`ParameterSet`]; binding it onto a tape and calling
//! [`Tape::backward_into`] accumulates parameter gradients in place.

pub mod gradcheck;
pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use params::{ParamId, Parameter, ParameterSet};
pub use tape::{ElementwiseOp, Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: value {value} outside the domain")]
    Domain { op: &'static str, value: f64 },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("{op}: index {index} out of bounds ({bound})")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: expected {expected} operands, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
}

/// Resets every gradient in `params` to zero.
pub fn zero_grads(params: &mut ParameterSet) {
    params.zero_grads();
}
