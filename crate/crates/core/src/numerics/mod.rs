//! Dense `f64` tensors with reverse-mode differentiation, Adam, and a
//! finite-difference gradient checker.

mod adam;
pub mod checkpoint;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, REL_FLOOR};
pub use graph::{broadcast_shape, Graph, Var};
pub use params::{fan_in_uniform, truncated_normal, Gradients, Param, ParamId, ParamStore};
pub use tensor::Tensor;

/// Collects the parameter gradients of a graph into `grads`, scaled.
pub fn collect_grads(graph: &Graph, grads: &mut Gradients, scale: f64) {
    for (id, g) in graph.param_grads() {
        grads.accumulate(id, g, scale);
    }
}
