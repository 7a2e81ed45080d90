//! Minimal reverse-mode differentiable tensor core.
//!
//! Everything is 64-bit. A [`Graph`] records primitive applications in
//! insertion order; [`Graph::backward`] replays them in reverse to produce
//! gradients for every leaf. Primitives that live elsewhere plug in through
//! [`CustomOp`].

mod bilinear;
pub mod conv;
mod error;
mod gradcheck;
mod graph;
mod linalg;
mod tensor;

pub use conv::Kernel;
pub use error::{DiffError, Result};
pub use gradcheck::{evaluate, finite_diff_check, GradCheck, GradCheckReport};
pub use graph::{BinaryOp, CustomOp, Gradients, Graph, SampleMode, UnaryOp, Var};
pub use tensor::{pairwise_sum, Tensor};
