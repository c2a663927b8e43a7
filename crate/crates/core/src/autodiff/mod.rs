//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is owned by one pipeline instance. Independent tapes share nothing
//! and can run on separate threads.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheck};
pub use tape::{Conv2dSpec, Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::sigmoid;

#[cfg(test)]
mod tests;
