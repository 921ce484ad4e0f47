//! Exact polynomial regressors built from hardmax attention blocks.

pub mod baselines;
pub mod constructor;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod network;
pub mod polynomials;
pub mod ridge;
pub mod training;

pub use error::{Error, Result};
