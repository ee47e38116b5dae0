//! Dense tensors, a reverse-mode autodiff graph and a finite-difference
//! gradient checker.

mod graph;
mod gradcheck;
mod kernels;
mod params;
mod tensor;

pub use graph::{CustomOp, Gradients, Graph, Var};
pub use gradcheck::{grad_check, grad_check_many, relative_error, GradCheckReport};
pub use kernels::{conv_out_len, Conv2dParams};
pub use params::{ParamEntry, ParamId, ParamStore};
pub use tensor::{Scalar, Tensor};

pub(crate) use graph::sigmoid;
