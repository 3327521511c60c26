//! Dense `f64`-backed tensors with a define-by-run gradient tape.
//!
//! Parameters live in a [`ParamStore`]; a forward pass reads them through a
//! [`Tape`], which records only operations that touch trainable values.
//! [`Tape::backward`] accumulates gradients into the store and [`AdamW`]
//! consumes them. [`grad_check`] is the finite-difference oracle used by the
//! test suites.

pub mod archive;
mod error;
pub mod gradcheck;
pub mod kernels;
mod ops;
mod optim;
mod param;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use ops::{ConvSpec, ResampleMode};
pub use optim::AdamW;
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var};
pub use tensor::{DType, Tensor};
