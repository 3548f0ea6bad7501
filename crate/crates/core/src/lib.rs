//! Differentiable cell-based architecture search for small-image
//! classification.
//!
//! The crate learns a convolutional cell by relaxing the choice of operator
//! on every edge of a small DAG into a softmax mixture, optimizes mixture
//! coefficients and network weights alternately, discretizes the result into
//! a [`Genotype`](genotype::Genotype), and trains/evaluates the fixed network.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod genotype;
pub mod gradcheck;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod params;
pub mod search_space;
pub mod seed;
pub mod supernet;
pub mod tensor;

pub use error::{Error, Result};
