//! Derivative-free inner solvers: Powell's conjugate-direction method and the
//! Nelder–Mead simplex.

mod nelder_mead;
mod powell;

pub use nelder_mead::nelder_mead;
pub use powell::powell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_INITIAL_STEP: f64 = 0.05;
pub const DEFAULT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InnerSolverOptions {
    pub max_evals: usize,
    pub x_tol: f64,
    pub f_tol: f64,
    pub initial_step: f64,
}

impl Default for InnerSolverOptions {
    fn default() -> Self {
        Self {
            max_evals: 1000,
            x_tol: DEFAULT_TOLERANCE,
            f_tol: DEFAULT_TOLERANCE,
            initial_step: DEFAULT_INITIAL_STEP,
        }
    }
}

impl InnerSolverOptions {
    pub fn with_max_evals(mut self, max_evals: usize) -> Self {
        self.max_evals = max_evals;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_evals == 0 {
            return Err(Error::InvalidArgument(
                "max_evals must be at least 1".into(),
            ));
        }
        if !(self.x_tol > 0.0 && self.f_tol > 0.0 && self.initial_step > 0.0) {
            return Err(Error::InvalidArgument(
                "tolerances and initial step must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    BudgetExhausted,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub x: Vec<f64>,
    pub f: f64,
    /// Number of calls made to the objective.
    pub evals: usize,
    pub iterations: usize,
    pub status: SolveStatus,
}

/// Objective wrapper counting calls and tracking the best point seen.
pub(crate) struct Tracked<F> {
    f: F,
    max_evals: usize,
    pub evals: usize,
    pub best_x: Vec<f64>,
    pub best_f: f64,
}

impl<F: FnMut(&[f64]) -> f64> Tracked<F> {
    pub fn new(f: F, max_evals: usize, x0: &[f64]) -> Self {
        Self {
            f,
            max_evals,
            evals: 0,
            best_x: x0.to_vec(),
            best_f: f64::INFINITY,
        }
    }

    pub fn exhausted(&self) -> bool {
        self.evals >= self.max_evals
    }

    /// `None` once the budget is spent.
    pub fn call(&mut self, x: &[f64]) -> Option<f64> {
        if self.exhausted() {
            return None;
        }
        self.evals += 1;
        let mut v = (self.f)(x);
        if v.is_nan() {
            v = f64::INFINITY;
        }
        if v < self.best_f {
            self.best_f = v;
            self.best_x.copy_from_slice(x);
        }
        Some(v)
    }

    pub fn finish(self, iterations: usize, converged: bool) -> SolveResult {
        SolveResult {
            x: self.best_x,
            f: self.best_f,
            evals: self.evals,
            iterations,
            status: if converged {
                SolveStatus::Converged
            } else {
                SolveStatus::BudgetExhausted
            },
        }
    }
}
