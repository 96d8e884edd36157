//! Tensor arithmetic and a reverse-mode differentiation engine whose
//! gradients are graph nodes, so they can be differentiated again.

pub mod graph;
pub mod tensor;

pub use graph::{gradient, second_gradient, Bindings, GradEntry, GradientMap, Graph, Mode, NodeId};
pub use tensor::Tensor;

use crate::error::Result;
use std::rc::Rc;

/// Evaluate the requested nodes under the given placeholder bindings.
pub fn forward(
    graph: &Graph,
    outputs: &[NodeId],
    bindings: &Bindings,
    mode: Mode,
) -> Result<Vec<Rc<Tensor>>> {
    graph.eval(outputs, bindings, mode)
}
