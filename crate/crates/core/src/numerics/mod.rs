//! Differentiable tensor ops on a reverse-mode tape, plus a finite-difference
//! gradient checker. Everything is `f64`.

mod conv;
mod elementwise;
pub mod gradcheck;
pub(crate) mod linalg;
mod nn;
pub mod shape;
mod tape;
mod tensor;

pub use elementwise::{gelu, gelu_grad};
pub use gradcheck::{grad_check, GradCheckConfig, GradReport, ParamGradReport};
pub use tape::{BackCtx, Gradients, Tape, Var};
pub use tensor::Tensor;
