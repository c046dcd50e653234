//! Dense tensors with a reverse-mode gradient tape and the primitive set the
//! relational-embedding model is built from.

mod error;
pub mod gradcheck;
pub mod init;
mod ops;
mod optim;
mod params;
mod real;
pub mod rten;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckReport};
pub use ops::{batch_stats, cosine_sim, conv4d_macs, conv4d_separable_macs, BatchStats, NormMode, Plane, EPS};
pub use optim::Sgd;
pub use params::{Bound, ParamSet};
pub use real::Real;
pub use tape::{Backward, Gradients, Tape, Var};
pub use tensor::Tensor;
