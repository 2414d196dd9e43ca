//! Dense `f64` tensors and a define-by-run reverse-mode differentiation
//! engine, sized for small convolutional encoders and graph losses.

mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_difference_check, finite_difference_check_many};
pub use graph::{Graph, OpKind, Var};
pub use tensor::Tensor;
