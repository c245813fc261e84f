//! Dense-array substrate and reverse-mode differentiation used by every
//! other module.

pub mod fd;
pub mod param;
pub mod tape;
pub mod tensor;

pub use fd::{check_gradients, FdReport, FD_STEP, FD_TOLERANCE};
pub use param::{ParamSet, Parameter};
pub use tape::{concat_cols, concat_rows, grad_of, Gradients, Tape, Var};
pub use tensor::{
    gelu, layer_norm_rows, logsumexp_all, matmul, sigmoid, softmax_rows, softplus, NumericsError,
    Result, Tensor,
};
