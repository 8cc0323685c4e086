//! Dense `f64` tensors with tape-based reverse-mode differentiation and a
//! central-difference gradient checker.

mod gradcheck;
mod suite;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, CheckReport, REL_ERROR_FLOOR};
pub use tape::{Gradients, Tape, Var};
pub use suite::{kernel_suite, OpCheck, SUITE_OPS};
pub use tensor::Tensor;
