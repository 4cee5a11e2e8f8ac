//! Dense tensors and a define-by-run reverse-mode differentiation tape.
//!
//! Every network and loss in the crate is assembled from the primitives on
//! [`Tape`]. A tape is built for one forward pass, differentiated once with
//! [`Tape::backward`] and then dropped.
//!
//! ```
//! use mmtl_core::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0)).unwrap();
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item().unwrap(), 6.0);
//! ```

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{central_difference, finite_diff_check, relative_error, richardson_difference, ridders_difference};
pub use tape::{Activation, Gradients, PoolMode, Tape, Var};
pub(crate) use tape::softmax_values;
pub use tensor::Tensor;
