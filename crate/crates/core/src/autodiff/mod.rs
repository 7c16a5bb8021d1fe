//! Tape-based reverse-mode automatic differentiation.
//!
//! Values are computed eagerly while the [`Tape`] records each op and what
//! it needs for the reverse pass. [`Tape::backward`] then replays the tape
//! once in reverse, accumulating exact analytic gradients.
//!
//! ```
//! use voxkit::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::scalar(0.0));
//! let y = tape.sin(x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 1.0);
//! ```

pub mod gradcheck;
mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};
