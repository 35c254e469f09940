//! Reverse-mode automatic differentiation over dense 2-D tensors.

mod backward;
mod check;
mod ops;
mod params;
mod tape;
mod tensor;

pub use check::finite_difference_check;
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Precision, RotationTable, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
