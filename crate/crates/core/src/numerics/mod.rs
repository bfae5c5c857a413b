//! Dense `f64` tensors and tape-based reverse-mode differentiation.

mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error};
pub(crate) use kernels::scan_backward;
pub use kernels::{gaussian_prior_value, scan_forward, sym_kl_value};
pub use tape::{Gradients, Tape, Var, KL_FLOOR};
pub use tensor::{layer_norm, matmul, softmax_rows, Tensor, LAYER_NORM_EPS};
