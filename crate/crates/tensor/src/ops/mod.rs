//! Differentiable operations, recorded on a [`Tape`](crate::Tape).

mod conv;
mod elementwise;
mod linalg;
pub(crate) mod nn;
mod reduce;
mod shape;
