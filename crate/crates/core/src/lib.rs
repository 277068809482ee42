//! Derivative-free nonlinear least squares by hierarchical stiff/sloppy
//! subspace optimization.

// negated comparisons make NaN arguments fail validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod bench;
pub mod error;
pub mod hessian;
pub mod hierarchical;
pub mod loss;
pub mod models;
pub mod solvers;
pub mod subspace;
pub mod types;
pub mod uncertainty;

pub use error::{Error, Result};
