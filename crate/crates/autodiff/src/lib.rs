//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Operations are recorded on a [`Tape`]; [`Tape::backward`] returns the
//! gradient of a scalar root with respect to every node that depends on a
//! differentiable leaf.
//!
//! ```
//! use concept_autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(&[1.0, 2.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let root = tape.sum(sq).unwrap();
//! let grads = tape.backward(root).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[2.0, 4.0]);
//! ```

mod error;
mod gradcheck;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::{grad_check, numeric_gradient};
pub use tape::{sigmoid, softplus, Gradients, Padding, Tape, Var};
pub use tensor::Tensor;
