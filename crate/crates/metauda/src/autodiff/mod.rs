//! Reverse-mode automatic differentiation over dense f64 tensors, with
//! double-backward support (backward rules are themselves recorded).

mod backward;
mod graph;
mod params;
mod var;

pub use backward::backward_vars;
pub use graph::{live_record_count, peak_record_count, reset_peak_record_count};
pub use graph::{Graph, GraphRef, Op};
pub use params::{
    finite_diff_gradient, grad, grad_vars, hessian_vector_product, BoundParams, Gradients,
    ParameterSet, TensorData,
};
pub use var::Var;
