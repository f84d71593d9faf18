//! Dense row-major tensors, the differentiable operations needed by small
//! volumetric convolutional networks, and a tape-based reverse-mode
//! differentiator with a finite-difference checker.
//!
//! Values are recorded on a [`Graph`] as operations execute; calling
//! [`Graph::backward`] on a scalar node walks the tape once in reverse and
//! returns gradients for every leaf that requires them.
//!
//! ```
//! use ttadapt_tensor::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let p = g.param("p", Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
//! let sq = g.mul(p, p).unwrap();
//! let loss = g.sum(sq);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.param("p").unwrap().data(), &[2.0, -4.0, 1.0]);
//! ```

mod element;
mod error;
mod gradcheck;
mod graph;
pub mod kernels;
mod linalg;
mod tensor;

pub use element::Element;
pub use error::TensorError;
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId};
pub use tensor::Tensor;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
