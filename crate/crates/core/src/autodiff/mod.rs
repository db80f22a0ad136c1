//! Dense `f64` matrices with tape-based reverse-mode differentiation.

mod check;
mod tape;
mod tensor;

pub use check::{grad_check, relative_error, GradCheckReport, ParamCheck, REL_ERROR_FLOOR};
pub use tape::{BackwardFn, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::{log_softmax_in_place, sigmoid};
