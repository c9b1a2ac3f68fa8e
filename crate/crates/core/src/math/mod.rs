//! Dense `f64` tensors, the handful of operations the model needs, and a
//! finite-difference gradient checker.

mod gradcheck;
mod ops;
mod tensor;

pub use gradcheck::{gradient_check, relative_error, GradCheckReport, REL_ERROR_FLOOR};
pub use ops::{
    binary, binary_backward, cross_entropy, matmul, matmul_backward, sigmoid, softmax, softmax_backward, unary,
    unary_backward, BinaryOp, UnaryOp,
};
pub(crate) use ops::{gemm, log_softmax_into, log_sum_exp, softmax_in_place};
pub use tensor::{ParamSet, Parameter, Tensor};
