//! Minimal reverse-mode differentiable numeric core.

mod adam;
mod gradcheck;
mod graph;
pub mod kernels;
mod ops;
mod params;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_params};
pub use graph::{Gradients, Graph, Var};
pub use ops::{attention, cross_entropy, mse_velocity_loss, mse_velocity_terms};
pub use params::{Binder, Grads, ParamSet};
pub use tensor::Tensor;

/// Plain row-wise softmax, outside any graph.
pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    graph::softmax(row)
}
