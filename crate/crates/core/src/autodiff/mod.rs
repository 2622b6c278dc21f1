//! Reverse-mode automatic differentiation over dense rank-1/rank-2 tensors.

mod gradcheck;
mod tape;


pub use gradcheck::{grad_check, grad_check_with_fault, relative_error, EntryCheck, GradCheckReport};
pub use tape::{gelu_scalar, sigmoid_scalar, OpKind, Tape, Var};
