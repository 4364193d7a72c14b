//! Gradient-free sequential Bayesian optimal experimental design.
//!
//! Ensemble Kalman inversion over designs, affine-invariant Langevin
//! dynamics for posterior sampling, Gaussian and Laplace bounds on the
//! expected information gain, and a 1D heat-equation test model.

pub mod aldi;
pub mod eig;
pub mod eki;
pub mod error;
pub mod gaussian;
pub mod harness;
pub mod linalg;
pub mod models;
pub mod rng;
pub mod sequential;
pub mod stats;

pub use error::{Error, Result};
