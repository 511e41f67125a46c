//! Numerical substrate: tensors, the differentiation tape, AdaDelta and
//! finite-difference gradient checks.

mod adadelta;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adadelta::{AdaDeltaConfig, AdaDeltaState};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{affine, softmax, Tensor};
pub(crate) use tensor::{log_softmax_kernel, softplus};
