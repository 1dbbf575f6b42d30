//! Dense `f64` tensors with tape-based reverse-mode differentiation that
//! supports gradients of gradients.

mod autograd;
pub mod dtns;
mod error;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use autograd::{grad, grad_blocked, vjp_many, GradOptions, Grads};
pub use error::{Result, TensorError};
pub use gradcheck::{check_grad, check_grad_selected, rel_err, GradCheckReport, ParamCheck, Selection};
pub use params::{ParamRole, ParamSet};
pub use tape::{checked_mode, CheckedGuard, KinkProbe, Tape};
pub use tensor::Tensor;
