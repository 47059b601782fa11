//! Dense tensors, a recording tape with reverse-mode gradients, optimizers and
//! finite-difference checking.

mod gradcheck;
mod graph;
mod kernels;
mod optim;
mod tensor;

pub use gradcheck::{
    grad_check, grad_check_params, rel_err, GradCheckEntry, GradCheckReport, FD_STEP, REL_FLOOR,
};
pub use graph::{Grads, Graph, OpKind, Var};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use tensor::{ParamId, ParamStore, Tensor};

pub(crate) use kernels::sigmoid;

#[cfg(test)]
mod tests;
