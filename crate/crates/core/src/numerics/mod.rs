//! Dense `f32` tensors and a reverse-mode gradient tape.

mod tape;
mod tensor;

pub use tape::{log_softmax, softmax, GradTape, Var};
pub use tensor::{NumericsError, Result, Tensor};
