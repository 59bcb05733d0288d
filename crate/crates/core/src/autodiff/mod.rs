//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a define-by-run tape: every op evaluates eagerly and
//! appends a node holding its value and whatever it needs for the
//! vector-Jacobian product. The tape is rebuilt for every step.

mod gradcheck;
mod graph;
pub mod kernels;
mod ops;

pub use gradcheck::{grad_check, op_gradient_errors, relative_error};
pub use graph::{Gradients, Graph, ParamStore, Var};
pub use ops::{PerturbedSelection, Unary};

#[cfg(test)]
mod tests;
