//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, EntryCheck, GradCheckReport};
pub(crate) use graph::sigmoid;
pub use graph::{BasicOp, Graph, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
