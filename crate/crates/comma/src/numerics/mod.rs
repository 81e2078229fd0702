//! Dense tensor algebra with reverse-mode differentiation and an independent
//! finite-difference oracle.
//!
//! Everything downstream (encoders, prompt generation, losses) is expressed
//! through [`Graph`] operations, so any scalar built here can be differentiated
//! with [`Graph::backward`] and verified with [`finite_diff_check`].

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_multi, DEFAULT_EPS};
pub use graph::{Graph, TensorId};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
