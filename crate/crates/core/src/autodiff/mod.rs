//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod params;
mod tape;
mod tensor;

pub use params::{Param, ParamId, ParamStore};
pub use tape::{softmax_values, BinaryOp, Graph, Tape, UnaryOp, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
