//! Reverse-mode differentiation over dense tensors.

mod gradcheck;
mod graph;
mod params;

pub use gradcheck::{GradCheck, GradCheckReport};
pub(crate) use graph::is_permutation;
pub use graph::{ElementwiseKind, GradFault, Graph, NodeId, ReduceKind};
pub use params::{ParamId, ParamStore};
