//! Dense tensors and a tape-based reverse-mode autodiff engine.

mod error;
pub mod gradcheck;
mod scalar;
mod tape;
mod tensor;

pub use error::{NumericsError, Result};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
