//! Minimal dense tensor engine with reverse-mode automatic differentiation.
//!
//! Values live on a [`Tape`] as row-major matrices. Parameters are borrowed
//! from [`Tensor`]s so that many tapes can share one parameter set, e.g. for
//! data-parallel evaluation. [`grad_check`] verifies recorded gradients
//! against central finite differences.

mod error;
mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradCheckReport};
pub use tape::{Tape, Var, MASK_FILL};
pub use tensor::{Scalar, Tensor};
