//! Dense matrices and the reverse-mode differentiation engine used by every
//! training path.

mod array;
mod gradcheck;
mod graph;
mod params;

pub use array::{argmax, row_log_softmax, row_softmax, Array2};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{ElementwiseOp, Gradients, Graph, Var};
pub use params::{DualParam, ParamId, ParamSet};
