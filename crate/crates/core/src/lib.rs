pub mod bench;
pub mod detector;
pub mod error;
pub mod estf;
pub mod metrics;
pub mod numerics;
pub mod postproc;
pub mod ssm;
pub mod synthdata;

pub use error::{Error, Result};
pub use numerics::{Parameter, Params, Tape, Tensor, Var};
