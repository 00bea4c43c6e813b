//! Minimal reverse-mode differentiable dense-tensor engine.
//!
//! Exactly the operations the occupancy head needs, each with a hand-written
//! backward rule verified against central finite differences. Graphs are
//! eager tapes: values materialize at record time, backward runs in reverse
//! insertion order with deterministic accumulation.

mod gradcheck;
mod graph;
mod grid;
mod ops_elementwise;
mod ops_linalg;
mod ops_sample;
mod ops_shape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{BackwardRule, GradSink, Gradients, Graph, NodeId, OpCtx};
pub use grid::{idx3, idx4, DenseGrid};
pub use ops_elementwise::Act;
