//! Dense matrices, the reverse-mode tape, and the finite-difference harness.

pub mod gradcheck;
pub mod matrix;
pub mod tape;

pub use gradcheck::{analytic_gradients, grad_check, GradCheckReport};
pub use matrix::{argmax, l2_norm, Matrix};
pub use tape::{gelu_scalar, AttentionShape, Gradients, Tape, Var};
