//! Minimal reverse-mode differentiation over dense f64 tensors.
//!
//! A [`Tape`] records every operation in creation order, which is already a
//! topological order, so [`Tape::backward`] is a single reverse sweep.

mod gradcheck;
mod kernels;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_report, GradCheckReport};
pub use optim::{sgd_step, sgd_step_factored, OptState};
pub use tape::{Gradients, OpKind, ParamGrad, Tape, Var};
pub use tensor::Tensor;
