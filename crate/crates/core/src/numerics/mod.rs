//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod attention;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use attention::KeySets;
pub use gradcheck::{grad_check, rel_err, GradCheck};
pub use params::{Param, ParamGrads, ParamId, ParamKind, ParamStore};
pub use tape::{sigmoid, smooth_l1, NormStats, Tape, Unary, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not match {len} stored values")]
    Storage { shape: Vec<usize>, len: usize },
    #[error("{0}: no operands")]
    Empty(&'static str),
    #[error("backward needs a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("unknown parameter {0}")]
    MissingParam(String),
    #[error("{0}")]
    Invalid(String),
}

#[cfg(test)]
mod tests;
