//! Dense tensors and a define-by-run reverse-mode gradient tape.
//!
//! Values are `f64`: finite-difference checks of whole-model losses need the
//! extra headroom. Callers that persist state round to `f32` themselves.

mod error;
mod gradcheck;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{
    grad_check, grad_check_at, grad_check_sampled, relative_error, Coordinate, REL_ERROR_FLOOR,
};
pub use tape::{gelu, gelu_grad, CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;
