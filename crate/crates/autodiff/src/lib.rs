//! Minimal `f64` tensor library with tape-based reverse-mode
//! differentiation, sized for small convolutional models on 20x20 grids.
//!
//! ```
//! use volcast_autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
//! let y = tape.sum(tape.square(x));
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod check;
mod error;
mod higher;
mod kernels;
mod param;
mod tape;
mod tensor;

pub use check::{grad_check, grad_check_params, relative_error, GradCheckReport, FD_STEP, REL_FLOOR};
pub use error::{AutodiffError, Result};
pub use param::{Bound, ParamId, ParamSet, ParamTensor};
pub use tape::{Gradients, Tape, Unary, Var};
pub use tensor::Tensor;

/// Negative slope of the leaky ReLU used throughout the models.
pub const LEAKY_SLOPE: f64 = 0.01;
