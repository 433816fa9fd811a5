//! Robust effect size index (RESI) estimation for linear and logistic
//! regression fitted by estimating equations.

pub mod analysis;
pub mod baselines;
pub mod benchmark;
pub mod bootstrap;
pub mod design;
pub mod error;
pub mod estimator;
pub mod intervals;
pub mod linalg;
pub mod models;
pub mod roots;
pub mod simlab;
pub mod special;
pub mod variance;

pub use error::{Error, Result};
