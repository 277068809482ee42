use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hessian::{fd_jacobian, DEFAULT_FD_STEP};
use crate::types::{BoundsBox, Evaluator, Phase, ResidualProblem};

use super::{check_start, BaselineResult};

const MAX_DAMPING: f64 = 1e16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub budget: Option<usize>,
    pub max_iterations: usize,
    pub fd_step: f64,
    pub initial_damping: f64,
    /// Stop when an accepted step lowers the loss by less than this
    /// fraction.
    pub f_tol: f64,
    /// Stop when the gradient's largest entry falls below this.
    pub g_tol: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            budget: None,
            max_iterations: 200,
            fd_step: DEFAULT_FD_STEP,
            initial_damping: 1e-3,
            f_tol: 1e-15,
            g_tol: 1e-15,
        }
    }
}

/// Levenberg–Marquardt on a forward-difference Jacobian.
///
/// Each iteration solves `(JᵀJ + μI) δ = −Jᵀr`. A step that lowers the loss
/// is accepted and `μ` shrinks tenfold; otherwise the iterate stays put and
/// `μ` grows tenfold. Steps are clipped to `bounds` when given.
pub fn levenberg_marquardt_fd(
    problem: &ResidualProblem,
    theta0: &[f64],
    bounds: Option<&BoundsBox>,
    cfg: &LmConfig,
) -> Result<BaselineResult> {
    check_start(problem, theta0)?;
    if !(cfg.fd_step > 0.0 && cfg.initial_damping > 0.0) {
        return Err(Error::InvalidArgument(
            "fd_step and initial_damping must be positive".into(),
        ));
    }
    let n = theta0.len();
    let mut ev = Evaluator::new(problem)
        .with_budget(cfg.budget)
        .with_reflection(false);
    let mut x = theta0.to_vec();
    if let Some(b) = bounds {
        b.clip(&mut x);
    }
    let mut current = ev.evaluate(&x, Phase::Baseline);
    if current.failed {
        return Err(Error::Simulation(
            "simulator failed at the initial point".into(),
        ));
    }
    let mut mu = cfg.initial_damping;
    let mut iterations = 0;
    let mut converged = false;

    'outer: while iterations < cfg.max_iterations && !ev.exhausted() {
        if current.loss == 0.0 {
            converged = true;
            break;
        }
        let (j, _) = fd_jacobian(
            &mut ev,
            &x,
            cfg.fd_step,
            Some(current.clone()),
            Phase::Baseline,
        )?;
        if ev.exhausted() {
            break;
        }
        iterations += 1;
        let g = j.tr_mul(&current.residual);
        if g.amax() < cfg.g_tol {
            converged = true;
            break;
        }
        let jtj = j.tr_mul(&j);
        loop {
            if mu > MAX_DAMPING {
                log::debug!("damping exceeded {MAX_DAMPING:e}; stopping");
                converged = true;
                break 'outer;
            }
            let a = &jtj + DMatrix::identity(n, n) * mu;
            let Some(chol) = a.cholesky() else {
                mu *= 10.0;
                continue;
            };
            let delta: DVector<f64> = chol.solve(&(-&g));
            let mut trial: Vec<f64> = x.iter().zip(delta.iter()).map(|(a, d)| a + d).collect();
            if let Some(b) = bounds {
                b.clip(&mut trial);
            }
            if trial == x {
                converged = true;
                break 'outer;
            }
            let e = ev.evaluate(&trial, Phase::Baseline);
            if ev.exhausted() {
                break 'outer;
            }
            if e.loss < current.loss {
                let drop = (current.loss - e.loss) / current.loss;
                x = trial;
                current = e;
                mu /= 10.0;
                if drop < cfg.f_tol {
                    converged = true;
                    break 'outer;
                }
                break;
            }
            mu *= 10.0;
        }
    }

    Ok(BaselineResult {
        theta: x,
        loss: current.loss,
        iterations,
        converged,
        records: ev.into_records(),
    })
}
