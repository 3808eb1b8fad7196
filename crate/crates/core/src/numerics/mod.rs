//! Dense matrix primitives, row-wise nonlinearities with their backward
//! passes, ordering utilities, the seeded generator and the
//! finite-difference oracle.

mod fd;
mod matrix;
mod ops;
mod rng;

pub use fd::{fd_gradient, relative_error};
pub use matrix::{dot, Matrix};
pub use ops::{
    gather_rows, layer_norm_rows, layer_norm_rows_backward, l2_normalize_rows,
    l2_normalize_rows_backward, log_sum_exp, sigmoid, softmax_rows, softmax_rows_backward, topk,
    IndexList, LAYER_NORM_EPS, NORM_EPS,
};
pub use rng::Rng;
