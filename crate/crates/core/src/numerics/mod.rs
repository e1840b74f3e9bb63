//! Dense tensors, a reverse-mode tape, and a finite-difference checker.
//!
//! All values are `f64`. Layout is row-major with explicit shapes; the only
//! broadcasting ops are the named ones (`add_bias`, `expand_last`,
//! `broadcast_spatial`).

mod conv;
mod gradcheck;
mod ops;
mod param;
mod tape;
mod tensor;

pub use conv::PoolPadding;
pub use gradcheck::{grad_check, grad_check_params, relative_error, CheckOptions, CheckReport, REL_ERR_FLOOR};
pub use ops::{sigmoid, softplus, TimePool};
pub use param::{
    accumulate_grads, count_params, load_checkpoint, read_checkpoint, save_checkpoint, zero_grads, ParamCount,
    Parameter, Params, CHECKPOINT_MAGIC,
};
pub use tape::{BackwardFn, GradCtx, Gradients, Tape, Var};
pub use tensor::{Tensor, TENSOR_MAGIC};

#[doc(hidden)]
pub fn join_path(prefix: &str, name: &str) -> String {
    param::join(prefix, name)
}

/// Epsilon used by every layer norm in the models.
pub const LN_EPS: f64 = 1e-5;
