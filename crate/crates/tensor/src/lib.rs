//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Graph`] records every operation applied to its tensors. Calling
//! [`Graph::backward`] on a scalar node walks the record in reverse and
//! returns the gradient of that scalar with respect to every leaf created
//! with [`Graph::leaf`]. Values are generic over [`Real`] so the same model
//! code runs in `f32` for training and `f64` for gradient verification.
//!
//! ```
//! use segalign_tensor::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

mod check;
mod error;
mod graph;
mod ops;
mod real;
pub mod suite;
mod tensor;

pub use check::{grad_check, relative_errors, GradCheckReport};
pub use error::TensorError;
pub use graph::{Gradients, Graph, Var};
pub use real::Real;
pub use tensor::Tensor;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
