//! Numerical substrate: f32 tensors, a reverse-mode autodiff tape, Adam,
//! a few layers, and the `TTNS` tensor container.

pub mod error;
pub mod gradcheck;
pub mod io;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod rng;
mod tape;
mod tensor;
pub mod vec3;

pub use error::{NumError, Result};
pub use ops::{BinaryOp, Operand, UnaryOp};
pub use optim::{adam_step, Adam, AdamConfig, AdamState};
pub use tape::{BackwardArgs, BackwardFn, Gradients, Tape, Var};
pub use tensor::Tensor;
