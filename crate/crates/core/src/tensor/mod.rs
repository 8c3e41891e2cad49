//! Dense tensors and the reverse-mode tape used by every network layer.

mod array;
mod gradcheck;
mod graph;
pub mod io;

pub use array::Tensor;
pub use gradcheck::{grad_check, grad_check_coords, relative_error, GradCheckReport, MAX_SKIPPED_FRACTION};
pub(crate) use graph::clamp_prob;
pub use graph::{BatchStats, Gradients, Graph, Var, KL_CLAMP};
