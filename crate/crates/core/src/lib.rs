//! Gaussian-process recovery of mean-field-game models from partial observations.

pub mod error;
pub mod experiment;
pub mod functionals;
pub mod gram;
pub mod kernels;
pub mod reference;
pub mod solver;
pub mod stationary;
pub mod timedep;

pub use error::{Error, Result};
