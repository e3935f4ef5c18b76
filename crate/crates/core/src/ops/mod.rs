//! Differentiable operations recorded on a [`Tape`](crate::Tape).

mod conv;
mod elementwise;
pub(crate) mod linalg;
mod sample;
mod shape;

pub use elementwise::{BinaryOp, Operand, UnaryOp};
