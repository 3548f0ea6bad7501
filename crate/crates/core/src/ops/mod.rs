//! Differentiable neural operators, implemented as methods on [`Tape`](crate::autodiff::Tape).

pub mod conv;
mod elementwise;
pub mod nn;
pub mod norm;
mod pool;

pub use conv::{Conv2dOptions, Padding};
pub use norm::{Affine, BatchStats};
