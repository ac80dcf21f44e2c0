//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation of one forward pass; [`Graph::backward`]
//! walks it in reverse from a scalar loss. Graphs are single-threaded; run
//! independent graphs in parallel for data parallelism.

mod gradcheck;
mod graph;
mod lstm;
mod tensor;

pub use gradcheck::{analytic_gradient, grad_check, grad_check_at, numeric_derivative, objective, relative_error, DEFAULT_EPS};
pub use graph::{BatchNormMode, BatchStats, Gradients, Graph, Var, BATCHNORM_EPS};
pub use lstm::{lstm_cell, LstmWeights};
pub use tensor::Tensor;

pub(crate) use graph::sigmoid;
pub(crate) use tensor::gemm;

#[cfg(test)]
mod tests;
