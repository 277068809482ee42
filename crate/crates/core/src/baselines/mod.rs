//! Reference optimizers sharing the simulator-call accounting of the
//! hierarchical driver.

mod de;
mod lm;

pub use de::{differential_evolution, differential_evolution_problem, DEConfig, DEOutcome};
pub use lm::{levenberg_marquardt_fd, LmConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solvers::{nelder_mead, powell, InnerSolverOptions, SolveStatus};
use crate::types::{reflect_nonnegative, EvaluationRecord, Evaluator, Phase, ResidualProblem};

/// Outcome of a baseline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub theta: Vec<f64>,
    pub loss: f64,
    pub iterations: usize,
    pub converged: bool,
    pub records: Vec<EvaluationRecord>,
}

impl BaselineResult {
    pub fn calls(&self) -> usize {
        self.records.len()
    }
}

fn check_start(problem: &ResidualProblem, theta0: &[f64]) -> Result<()> {
    if theta0.len() != problem.dimension() {
        return Err(Error::DimensionMismatch {
            expected: problem.dimension(),
            got: theta0.len(),
        });
    }
    Ok(())
}

fn run_full_space<S>(
    problem: &ResidualProblem,
    theta0: &[f64],
    budget: usize,
    opts: &InnerSolverOptions,
    solver: S,
) -> Result<BaselineResult>
where
    S: FnOnce(
        &mut dyn FnMut(&[f64]) -> f64,
        &[f64],
        &InnerSolverOptions,
    ) -> crate::solvers::SolveResult,
{
    check_start(problem, theta0)?;
    opts.validate()?;
    let mut ev = Evaluator::new(problem).with_budget(Some(budget));
    let opts = InnerSolverOptions {
        max_evals: budget,
        ..*opts
    };
    let result = {
        let mut f = |x: &[f64]| ev.evaluate(x, Phase::Baseline).loss;
        solver(&mut f, theta0, &opts)
    };
    Ok(BaselineResult {
        theta: reflect_nonnegative(&result.x),
        loss: result.f,
        iterations: result.iterations,
        converged: result.status == SolveStatus::Converged,
        records: ev.into_records(),
    })
}

/// Powell's method over all parameters, evaluated at `|θ|`.
pub fn full_space_powell(
    problem: &ResidualProblem,
    theta0: &[f64],
    budget: usize,
    opts: &InnerSolverOptions,
) -> Result<BaselineResult> {
    run_full_space(problem, theta0, budget, opts, |f, x0, o| powell(f, x0, o))
}

/// Nelder–Mead over all parameters, evaluated at `|θ|`.
pub fn full_space_nelder_mead(
    problem: &ResidualProblem,
    theta0: &[f64],
    budget: usize,
    opts: &InnerSolverOptions,
) -> Result<BaselineResult> {
    run_full_space(problem, theta0, budget, opts, |f, x0, o| {
        nelder_mead(f, x0, o)
    })
}
