//! Deterministic dense tensors with a reverse-mode differentiation tape.
//!
//! Values are [`Tensor`]s: row-major `f64` buffers with an explicit
//! [`Precision`]. Differentiable computation is recorded on a [`Tape`] as
//! [`Var`] handles; [`Tape::backward`] replays the adjoints once and returns
//! [`Gradients`] for every leaf created with [`Tape::leaf`].
//!
//! Every operation checks its output for NaN/Inf and fails with
//! [`TensorError::NonFinite`] instead of propagating it.

mod backward;
mod error;
pub mod gradcheck;
mod kernels;
mod ops;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{analytic_gradients, check_gradients, compare_gradients, finite_diff_check, relative_error, Coords, InputReport};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{strides_of, Precision, Tensor};
