//! Dense-tensor reverse-mode automatic differentiation and the Adam optimizer.

mod adam;
mod conv;
mod gradcheck;
mod graph;
mod params;
mod tensor;

use std::collections::BTreeMap;

use thiserror::Error;

pub use adam::{adam_step, AdamConfig};
pub use gradcheck::{
    compare_gradients, finite_diff_check, BlockReport, FiniteDiffReport, DEFAULT_STEP, MAX_CHECK_PARAMS, RELATIVE_FLOOR,
};
pub use graph::{sigmoid, CompGraph, Evaluation, Feed, NodeId, Op, LEAKY_SLOPE, LOG_FLOOR};
pub use params::{ParamEntry, ParamSet, PARAMS_MAGIC};
pub use tensor::{Tensor, MAX_RANK};

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("tensor rank {rank} exceeds 4")]
    Rank { rank: usize },
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    Length { shape: Vec<usize>, len: usize },
    #[error("non-finite value at flat index {index}")]
    NonFiniteData { index: usize },
    #[error("node {node} ({op}): shape mismatch: {detail}")]
    Shape { node: NodeId, op: String, detail: String },
    #[error("node {node} ({op}) produced a non-finite value")]
    NonFinite { node: NodeId, op: String },
    #[error("node {node}: '{name}' is not bound")]
    Unbound { node: NodeId, name: String },
    #[error("node {node} does not exist")]
    UnknownNode { node: NodeId },
    #[error("node {node} has not been evaluated")]
    NotEvaluated { node: NodeId },
    #[error("loss node {node} has shape {shape:?}, expected a scalar")]
    NonScalarLoss { node: NodeId, shape: Vec<usize> },
    #[error("unknown parameter '{name}'")]
    UnknownParam { name: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("parameter file: {0}")]
    Format(String),
}

/// Evaluates `graph` and returns the values of the requested nodes.
pub fn evaluate(
    graph: &CompGraph,
    feed: &Feed,
    params: &ParamSet,
    outputs: &[NodeId],
) -> Result<BTreeMap<NodeId, Tensor>, AutodiffError> {
    let eval = graph.evaluate(feed, params)?;
    Ok(outputs.iter().map(|&o| (o, eval.value(o).clone())).collect())
}

/// Evaluates `graph` and accumulates `d loss / d param` into `params`.
/// Returns the loss value.
pub fn backprop(graph: &CompGraph, feed: &Feed, params: &mut ParamSet, loss: NodeId) -> Result<f64, AutodiffError> {
    let eval = graph.evaluate(feed, params)?;
    graph.backprop(&eval, params, loss)?;
    Ok(eval.scalar(loss))
}
