//! Dense tensors and a recorded reverse-mode differentiation tape.
//!
//! Training runs in `f32`; the gradient-check and oracle suites run the same
//! code in `f64`.

pub mod element;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
pub mod tape;
pub mod tensor;

pub use element::{DType, Element};
pub use error::{Result, TensorError};
pub use gradcheck::{gradcheck, gradcheck_at, GradCheckReport, LossFn};
pub use tape::{Gradients, Tape, Unary, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
