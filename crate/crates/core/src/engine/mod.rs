//! Dense-tensor differentiable computation core.

mod graph;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use params::{Adam, Grads, ParamGroup, ParamId, ParamStore, Sgd};
pub use tensor::{argmax, top_k, Tensor};

use crate::error::Result;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.01;

/// Layer normalization over the last axis followed by leaky rectification.
pub fn layernorm_leakyrelu(g: &mut Graph<'_>, x: Var, gain: Var, bias: Var, slope: f64) -> Result<Var> {
    let y = g.layer_norm(x, gain, bias, LAYER_NORM_EPS)?;
    g.leaky_relu(y, slope)
}
