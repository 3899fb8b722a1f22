//! Dense-matrix reverse-mode differentiation core.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::{compare_grads, finite_diff_grad, GradComparison};
pub use matrix::DenseMatrix;
pub use tape::{ExprNode, Gradients, NodeId, Op, ParamId, Tape, COSINE_EPS_NORM};
