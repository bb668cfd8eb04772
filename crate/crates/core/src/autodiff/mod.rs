//! A small tape-based reverse-mode differentiation engine.
//!
//! Every value lives in a [`Graph`] as a node addressed by a [`Var`]. Nodes
//! created from operands that require gradients record the operation so that
//! [`Graph::backward`] can replay the tape in reverse. Shapes must match
//! exactly; the engine does not broadcast.
//!
//! ```
//! use anyseg::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap(), true);
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum_all(sq).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod gradcheck;
mod graph;
mod ops;
mod tensor;

pub use gradcheck::{grad_check, grad_check_coords, GradCheckReport};
pub use graph::{Graph, Var};
pub use ops::{Op, OpKind, LOG_EPS};
pub use tensor::{Real, Tensor};

pub(crate) use ops::cosine_degenerate;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{kind}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        kind: OpKind,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("{kind}: invalid attribute: {detail}")]
    InvalidAttr { kind: OpKind, detail: String },
    #[error("unknown operation kind `{0}`")]
    UnknownKind(String),
    #[error("{kind}: expected {expected} operand(s), got {got}")]
    Arity {
        kind: OpKind,
        expected: usize,
        got: usize,
    },
    #[error("loss must hold a single value, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variable {0} does not belong to this graph")]
    UnknownVar(usize),
    #[error("non-finite function value {value} when probing coordinate {index}")]
    NonFiniteProbe { index: usize, value: f64 },
    #[error("gradient check step must be positive and finite, got {0}")]
    InvalidStep(f64),
}
