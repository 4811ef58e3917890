//! Reverse-mode differentiation engine and the layer kernels it records.

pub mod gradcheck;
pub mod kernels;
mod optim;
mod tape;

pub use kernels::Padding;
pub use optim::{Optimizer, OptimizerKind};
pub use tape::{Tape, Var};
