//! Deterministic differentiable kernel for the training objectives.
//!
//! Everything is `f64` and single-threaded with a fixed reduction order, so
//! a fixed seed reproduces training bit for bit. No external autodiff or
//! BLAS is involved; the op set is small enough to own outright and every
//! backward formula is covered by finite-difference tests.

mod check;
mod optim;
mod tape;
mod tensor;

pub use check::finite_diff_check;
pub use optim::{clip_global_norm, Adam, GroupSpec, OptimError, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};
pub use tape::{Gradients, Tape, TapeError, VarId};
pub use tensor::Tensor;
