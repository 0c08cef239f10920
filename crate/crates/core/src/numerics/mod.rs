//! Dense tensors, a reverse-mode tape and a finite-difference gradient checker.

pub mod gradcheck;
pub(crate) mod kernels;
pub mod layers;
pub mod ops;
mod store;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, EntryCheck, GradCheckConfig, GradCheckReport};
pub use kernels::{gelu as gelu_scalar, GELU_CUBIC, GELU_SQRT_2_OVER_PI};
pub use layers::{LayerNorm, Linear, Mlp, Session};
pub use store::{ParamId, ParamStore, Parameter};
pub use tape::{dropout_mask, Gradients, Tape, Var};
pub use tensor::Tensor;
