//! Scalar expression graphs with exact input derivatives and reverse-mode
//! parameter gradients.
//!
//! A [`Graph`] holds input leaves (named point coordinates such as `"t"` and
//! `"x"`), parameter leaves (indices into a flat parameter vector), constants
//! and primitive applications. [`Graph::d`] builds the derivative of a node
//! with respect to an input as new graph nodes, so derivatives can be nested
//! and are themselves differentiable with respect to the parameters.
//!
//! Losses are averages over point sets. [`Graph::add_batch`] registers a set
//! of points and [`Graph::batch_mean`] averages a per-point expression over
//! it; the [`Evaluator`] compiles such expressions into lane-batched tapes.

mod derive;
mod eval;
mod graph;
mod tape;

#[cfg(test)]
mod tests;

pub use eval::{Bindings, Evaluation, Evaluator, PointMap};
pub use graph::{sigmoid, softplus, BatchId, ExprNode, Graph, Primitive};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{primitive:?} expects {expected} children, got {got}")]
    Arity { primitive: Primitive, expected: &'static str, got: usize },
    #[error("expression node belongs to a different graph")]
    ForeignNode,
    #[error("unknown input '{0}'")]
    UnknownInput(String),
    #[error("derivative order must be 1 or 2, got {0}")]
    InvalidOrder(u8),
    #[error("derivative order {requested} on a node of order {have} exceeds 2")]
    OrderExceeded { have: u8, requested: u8 },
    #[error("input '{0}' is not bound")]
    Unbound(String),
    #[error("parameter vector has {got} entries, graph needs {needed}")]
    ParamLength { needed: usize, got: usize },
    #[error("evaluation produced a non-finite value")]
    NonFinite,
    #[error("non-finite gradient at parameter {index}")]
    NonFiniteGradient { index: usize },
    #[error("batch means cannot be nested")]
    NestedBatch,
    #[error("cannot differentiate a batch mean with respect to a point input")]
    DerivativeOfBatch,
    #[error("invalid batch: {0}")]
    Batch(String),
}
