//! The hierarchical outer loop: build the stiff/sloppy geometry at the current
//! iterate, minimize along the stiff directions, re-align and minimize along
//! the sloppy directions, then rebuild the geometry and stop once the stiff
//! subspace no longer rotates.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hessian::{
    directional_diffs, draw_sketch_with, fd_jacobian, gauss_newton_hessian, reduced_hessian,
    DEFAULT_FD_STEP, DEFAULT_LAMBDA_REG,
};
use crate::solvers::{nelder_mead, powell, InnerSolverOptions, SolveStatus};
use crate::subspace::{
    eigendecompose, misalignment, split_stiff, EigenSpectrum, SubspacePartition, DEFAULT_GAMMA,
    DEFAULT_TAU,
};
use crate::types::{
    reflect_nonnegative, Evaluation, EvaluationRecord, Evaluator, ParameterVector, Phase,
    ResidualProblem, SENTINEL_LOSS,
};

/// Spectra whose eigenvalues all fall below this multiple of `λ_reg` are
/// treated as a flat region.
const FLAT_FACTOR: f64 = 1e2;
const FLAT_RETRY_STEP_FACTOR: f64 = 10.0;
const MIN_STEP_LENGTH: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Full forward-difference Jacobian and the regularized Gauss-Newton
    /// Hessian.
    Exact,
    /// Residual probes along a random rank-`k` sketch.
    Stochastic,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Exact => "exact",
            Strategy::Stochastic => "stochastic",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Strategy::Exact),
            "stochastic" | "reduced" => Ok(Strategy::Stochastic),
            other => Err(Error::InvalidArgument(format!(
                "unknown strategy '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HierarchicalConfig {
    pub strategy: Strategy,
    /// Maximum number of outer iterations.
    pub n_max: usize,
    /// Stop once the stiff-subspace misalignment drops below this.
    pub eps_stop: f64,
    pub lambda_reg: f64,
    /// Variance fraction assigned to the stiff subspace.
    pub gamma: f64,
    /// Sloppy directions below `tau` times the leading sloppy eigenvalue are
    /// dropped.
    pub tau: f64,
    /// Sketch rank; required for the stochastic strategy.
    pub sketch_k: Option<usize>,
    pub fd_step: f64,
    pub seed: u64,
    /// Rotate the sloppy basis by the curvature measured after the stiff
    /// solve.
    pub realign: bool,
    /// Draw a fresh sketch every outer iteration.
    pub resample_sketch: bool,
    /// Start each stiff solve from the previous sloppy offset.
    pub carry_sloppy_offset: bool,
    /// Number of recent misalignment values averaged for the stopping test;
    /// 1 uses the latest value alone.
    pub smoothing_window: usize,
    /// Scale inner-solver coordinates by the curvature of each direction.
    pub curvature_scaling: bool,
    /// Upper limit on a scaled direction's initial step length.
    pub max_step_length: f64,
    /// Largest distance an outer step may move the iterate, in normalized
    /// units. Trial points beyond it get the sentinel loss without a
    /// simulator call. `None` leaves steps unbounded.
    pub trust_radius: Option<f64>,
    pub stiff_evals_per_dim: usize,
    pub sloppy_evals_per_dim: usize,
    /// Tolerances for the stiff Powell solve; `max_evals` is overridden by
    /// the per-dimension budget.
    pub stiff_inner: InnerSolverOptions,
    /// Tolerances for the sloppy Nelder–Mead solve.
    pub sloppy_inner: InnerSolverOptions,
    /// Total simulator-call budget for the run.
    pub budget: Option<usize>,
}

impl Default for HierarchicalConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Exact,
            n_max: 50,
            eps_stop: 1e-4,
            lambda_reg: DEFAULT_LAMBDA_REG,
            gamma: DEFAULT_GAMMA,
            tau: DEFAULT_TAU,
            sketch_k: None,
            fd_step: DEFAULT_FD_STEP,
            seed: 0,
            realign: true,
            resample_sketch: true,
            carry_sloppy_offset: false,
            smoothing_window: 1,
            curvature_scaling: true,
            max_step_length: 1.0,
            trust_radius: None,
            stiff_evals_per_dim: 60,
            sloppy_evals_per_dim: 60,
            stiff_inner: InnerSolverOptions {
                x_tol: 1e-8,
                f_tol: 1e-10,
                ..InnerSolverOptions::default()
            },
            sloppy_inner: InnerSolverOptions {
                x_tol: 1e-4,
                f_tol: 1e-4,
                ..InnerSolverOptions::default()
            },
            budget: None,
        }
    }
}

impl HierarchicalConfig {
    pub fn exact() -> Self {
        Self::default()
    }

    pub fn stochastic(k: usize) -> Self {
        Self {
            strategy: Strategy::Stochastic,
            sketch_k: Some(k),
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_budget(mut self, budget: Option<usize>) -> Self {
        self.budget = budget;
        self
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.n_max == 0 {
            return bad("n_max must be at least 1".into());
        }
        if !(self.eps_stop > 0.0) {
            return bad(format!("eps_stop must be positive, got {}", self.eps_stop));
        }
        if !(self.lambda_reg >= 0.0) {
            return bad(format!(
                "lambda_reg must be non-negative, got {}",
                self.lambda_reg
            ));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        if !(self.fd_step > 0.0) {
            return bad(format!("fd_step must be positive, got {}", self.fd_step));
        }
        if self.smoothing_window == 0 {
            return bad("smoothing_window must be at least 1".into());
        }
        if !(self.max_step_length > MIN_STEP_LENGTH) {
            return bad(format!(
                "max_step_length too small: {}",
                self.max_step_length
            ));
        }
        if let Some(r) = self.trust_radius {
            if !(r > 0.0) {
                return bad(format!("trust_radius must be positive, got {r}"));
            }
        }
        if self.stiff_evals_per_dim == 0 || self.sloppy_evals_per_dim == 0 {
            return bad("per-dimension inner budgets must be positive".into());
        }
        if self.strategy == Strategy::Stochastic {
            match self.sketch_k {
                Some(k) if (1..=n).contains(&k) => {}
                Some(k) => return bad(format!("sketch_k must satisfy 1 <= k <= {n}, got {k}")),
                None => return bad("the stochastic strategy needs sketch_k".into()),
            }
        }
        self.stiff_inner.validate()?;
        self.sloppy_inner.validate()
    }
}

/// Geometry at one iterate together with the residuals it was built from.
#[derive(Debug, Clone)]
pub struct Geometry {
    pub partition: SubspacePartition,
    pub base: Evaluation,
    /// Simulator calls spent building it.
    pub calls: usize,
    /// Finite-difference step actually used.
    pub fd_step: f64,
}

/// Stiff/sloppy partition at `theta`. Spends `n + 1` calls for the exact
/// strategy and `k + 1` for the stochastic one (more if the spectrum is flat
/// and the construction is retried with a larger step).
pub fn build_geometry(
    problem: &ResidualProblem,
    theta: &[f64],
    config: &HierarchicalConfig,
) -> Result<SubspacePartition> {
    config.validate(problem.dimension())?;
    let mut ev = Evaluator::new(problem);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sketch = None;
    Ok(geometry_at(&mut ev, theta, config, &mut rng, &mut sketch, None)?.partition)
}

/// Geometry construction through an existing evaluator. `base` may carry the
/// known residuals at `theta`, saving one call. `sketch` holds the current
/// sketch when it is not resampled every iteration.
pub fn geometry_at(
    ev: &mut Evaluator<'_>,
    theta: &[f64],
    config: &HierarchicalConfig,
    rng: &mut ChaCha8Rng,
    sketch: &mut Option<DMatrix<f64>>,
    base: Option<Evaluation>,
) -> Result<Geometry> {
    let n = theta.len();
    let start = ev.calls();
    let omega = match config.strategy {
        Strategy::Exact => None,
        Strategy::Stochastic => {
            let k = config.sketch_k.ok_or_else(|| {
                Error::InvalidArgument("the stochastic strategy needs sketch_k".into())
            })?;
            if config.resample_sketch || sketch.is_none() {
                *sketch = Some(draw_sketch_with(n, k, rng)?.omega);
            }
            sketch.clone()
        }
    };

    let mut h = config.fd_step;
    let mut base = base;
    let mut flat = false;
    loop {
        let (matrix, evaluation) = match &omega {
            None => {
                let (j, e) = fd_jacobian(ev, theta, h, base.take(), Phase::Geometry)?;
                (gauss_newton_hessian(&j, config.lambda_reg), e)
            }
            Some(o) => {
                let (y, e) = directional_diffs(ev, theta, o, h, base.take(), Phase::Geometry)?;
                (reduced_hessian(&y), e)
            }
        };
        let spectrum = eigendecompose(&matrix)?;
        let threshold = FLAT_FACTOR * config.lambda_reg;
        let is_flat = spectrum
            .eigenvalues
            .first()
            .is_none_or(|&l| l < threshold);
        if is_flat && !flat {
            log::warn!(
                "flat region at current iterate; retrying geometry with step {}",
                h * FLAT_RETRY_STEP_FACTOR
            );
            flat = true;
            h *= FLAT_RETRY_STEP_FACTOR;
            base = Some(evaluation);
            continue;
        }
        let mut partition = match SubspacePartition::from_spectrum(
            spectrum.clone(),
            omega.as_ref(),
            config.gamma,
            config.tau,
        ) {
            Ok(p) => p,
            Err(Error::ZeroSpectrum) => zero_spectrum_partition(spectrum, omega.as_ref()),
            Err(e) => return Err(e),
        };
        partition.flat = flat;
        return Ok(Geometry {
            partition,
            base: evaluation,
            calls: ev.calls() - start,
            fd_step: h,
        });
    }
}

/// Every direction is treated as sloppy when there is no curvature at all.
fn zero_spectrum_partition(
    spectrum: EigenSpectrum,
    omega: Option<&DMatrix<f64>>,
) -> SubspacePartition {
    let vectors = match omega {
        Some(o) => o * &spectrum.eigenvectors,
        None => spectrum.eigenvectors.clone(),
    };
    let d = spectrum.dimension();
    SubspacePartition {
        stiff: DMatrix::zeros(vectors.nrows(), 0),
        sloppy: vectors,
        k_s: 0,
        k_l: d.saturating_sub(1),
        sloppy_values: spectrum.eigenvalues.clone(),
        spectrum,
        flat: true,
    }
}

/// Outcome of one application of the stiff/realign/sloppy operator.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub theta_next: Vec<f64>,
    /// Residuals at `theta_next`.
    pub evaluation: Evaluation,
    pub loss_before: f64,
    pub loss_after_stiff: f64,
    /// Sloppy offset taken in this step, in ambient coordinates.
    pub sloppy_offset: Vec<f64>,
    pub stiff_status: Option<SolveStatus>,
    pub sloppy_status: Option<SolveStatus>,
    pub stiff_calls: usize,
    pub realign_calls: usize,
    pub sloppy_calls: usize,
}

/// One stiff solve, sloppy re-alignment and sloppy solve from `theta`.
///
/// `base` holds the residuals at `theta`. The returned point is never worse
/// than `theta`. `carried` is the previous sloppy offset, used only when
/// `config.carry_sloppy_offset` is set.
pub fn step(
    ev: &mut Evaluator<'_>,
    theta: &[f64],
    base: &Evaluation,
    partition: &SubspacePartition,
    config: &HierarchicalConfig,
    carried: Option<&[f64]>,
) -> Result<StepOutcome> {
    let n = theta.len();
    let mut out = StepOutcome {
        theta_next: theta.to_vec(),
        evaluation: base.clone(),
        loss_before: base.loss,
        loss_after_stiff: base.loss,
        sloppy_offset: vec![0.0; n],
        stiff_status: None,
        sloppy_status: None,
        stiff_calls: 0,
        realign_calls: 0,
        sloppy_calls: 0,
    };
    if base.loss == 0.0 {
        return Ok(out);
    }

    // stiff solve
    let mut best = (theta.to_vec(), base.clone());
    let k_s = partition.k_s;
    if k_s > 0 {
        let mut origin = theta.to_vec();
        if config.carry_sloppy_offset {
            if let Some(offset) = carried {
                for (o, d) in origin.iter_mut().zip(offset) {
                    *o += d;
                }
            }
        }
        let stiff_values = &partition.spectrum.eigenvalues[..k_s];
        let basis = scaled_basis(&partition.stiff, stiff_values, base.loss, config);
        ev.pin(theta, base.clone());
        let budget = inner_budget(config.stiff_evals_per_dim * k_s, ev);
        if budget > 0 {
            let before = ev.calls();
            let opts = inner_options(&config.stiff_inner, budget);
            let result = powell(
                |u| {
                    let x = offset_point(&origin, &basis, u);
                    if outside(&x, theta, config.trust_radius) {
                        return SENTINEL_LOSS;
                    }
                    let e = ev.evaluate(&x, Phase::Stiff);
                    if e.loss < best.1.loss {
                        best = (ev.canonical(&x), e.clone());
                    }
                    e.loss
                },
                &vec![0.0; k_s],
                &opts,
            );
            out.stiff_status = Some(result.status);
            out.stiff_calls = ev.calls() - before;
        }
    }
    let (theta_prime, eval_prime) = best;
    out.loss_after_stiff = eval_prime.loss;
    ev.pin(&theta_prime, eval_prime.clone());

    // sloppy re-alignment and solve
    let p = partition.sloppy_dim();
    let mut best = (theta_prime.clone(), eval_prime.clone());
    if p > 0 && ev.remaining() != Some(0) {
        let (sloppy, values) = if config.realign {
            let before = ev.calls();
            let (y, _) = directional_diffs(
                ev,
                &theta_prime,
                &partition.sloppy,
                config.fd_step,
                Some(eval_prime.clone()),
                Phase::Realign,
            )?;
            out.realign_calls = ev.calls() - before;
            let local = eigendecompose(&reduced_hessian(&y))?;
            (&partition.sloppy * &local.eigenvectors, local.eigenvalues)
        } else {
            (partition.sloppy.clone(), partition.sloppy_values.clone())
        };
        let basis = scaled_basis(&sloppy, &values, eval_prime.loss, config);
        let budget = inner_budget(config.sloppy_evals_per_dim * p, ev);
        if budget > 0 && eval_prime.loss > 0.0 {
            let before = ev.calls();
            let opts = inner_options(&config.sloppy_inner, budget);
            let result = nelder_mead(
                |u| {
                    let x = offset_point(&theta_prime, &basis, u);
                    if outside(&x, theta, config.trust_radius) {
                        return SENTINEL_LOSS;
                    }
                    let e = ev.evaluate(&x, Phase::Sloppy);
                    if e.loss < best.1.loss {
                        best = (ev.canonical(&x), e.clone());
                    }
                    e.loss
                },
                &vec![0.0; p],
                &opts,
            );
            out.sloppy_status = Some(result.status);
            out.sloppy_calls = ev.calls() - before;
        }
    }
    let (theta_next, evaluation) = best;
    out.sloppy_offset = theta_next
        .iter()
        .zip(&theta_prime)
        .map(|(a, b)| a - b)
        .collect();
    for s in [out.stiff_status, out.sloppy_status].into_iter().flatten() {
        if s == SolveStatus::BudgetExhausted {
            log::debug!("inner solver stopped on its evaluation budget");
        }
    }
    out.theta_next = theta_next;
    out.evaluation = evaluation;
    Ok(out)
}

/// Basis columns scaled so a unit move along column `j` changes a quadratic
/// loss of curvature `λ_j` by roughly the current loss.
fn scaled_basis(
    basis: &DMatrix<f64>,
    values: &[f64],
    loss: f64,
    config: &HierarchicalConfig,
) -> DMatrix<f64> {
    let mut out = basis.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        let length = if config.curvature_scaling {
            let lambda = values.get(j).copied().unwrap_or(0.0);
            let natural = if lambda > 0.0 {
                (2.0 * loss / lambda).sqrt()
            } else {
                f64::INFINITY
            };
            natural.clamp(MIN_STEP_LENGTH, config.max_step_length)
        } else {
            config.sloppy_inner.initial_step
        };
        col *= length;
    }
    out
}

fn outside(x: &[f64], center: &[f64], radius: Option<f64>) -> bool {
    radius.is_some_and(|r| {
        x.iter()
            .zip(center)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            > r * r
    })
}

fn offset_point(origin: &[f64], basis: &DMatrix<f64>, u: &[f64]) -> Vec<f64> {
    let d = basis * DVector::from_column_slice(u);
    origin.iter().zip(d.iter()).map(|(o, v)| o + v).collect()
}

fn inner_budget(wanted: usize, ev: &Evaluator<'_>) -> usize {
    ev.remaining().map_or(wanted, |r| wanted.min(r))
}

/// Inner solvers work in scaled coordinates where one unit is the natural
/// step length, so their initial step is one unit.
fn inner_options(base: &InnerSolverOptions, max_evals: usize) -> InnerSolverOptions {
    InnerSolverOptions {
        max_evals,
        initial_step: 1.0,
        ..*base
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationDiagnostics {
    pub iteration: usize,
    pub loss_before: f64,
    pub loss_after: f64,
    /// Cumulative simulator calls at the end of the iteration.
    pub calls: usize,
    /// Misalignment between this iteration's stiff basis and the next one;
    /// absent when the run stopped before rebuilding the geometry.
    pub misalignment: Option<f64>,
    pub k_s: usize,
    pub k_l: usize,
    pub eigenvalues: Vec<f64>,
    pub flat: bool,
    pub stiff_calls: usize,
    pub realign_calls: usize,
    pub sloppy_calls: usize,
    pub geometry_calls: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizationTrace {
    pub records: Vec<EvaluationRecord>,
    pub iterations: Vec<IterationDiagnostics>,
}

impl OptimizationTrace {
    /// Best loss seen after each simulator call.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.records
            .iter()
            .map(|r| {
                best = best.min(r.loss);
                best
            })
            .collect()
    }

    /// Number of calls made when the best loss first reached `threshold`.
    pub fn calls_to_threshold(&self, threshold: f64) -> Option<usize> {
        self.records
            .iter()
            .position(|r| r.loss <= threshold)
            .map(|i| i + 1)
    }
}

#[derive(Debug, Clone)]
pub struct HierarchicalResult {
    pub theta_final: ParameterVector,
    pub loss_final: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: OptimizationTrace,
    pub final_spectrum: EigenSpectrum,
    /// Stiff basis of the last geometry, in ambient coordinates.
    pub final_stiff: DMatrix<f64>,
    pub misalignment_history: Vec<f64>,
    /// Loss at the start of each outer iteration, then the final loss.
    pub loss_history: Vec<f64>,
}

/// Runs the hierarchical optimizer from `theta0`.
pub fn run(
    problem: &ResidualProblem,
    theta0: &[f64],
    config: &HierarchicalConfig,
) -> Result<HierarchicalResult> {
    let n = problem.dimension();
    if theta0.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: theta0.len(),
        });
    }
    config.validate(n)?;
    let mut ev = Evaluator::new(problem).with_budget(config.budget);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sketch = None;

    let mut theta = reflect_nonnegative(theta0);
    let init = ev.evaluate(&theta, Phase::Init);
    if init.failed {
        return Err(Error::Simulation(
            "simulator failed at the initial point".into(),
        ));
    }
    let mut geometry = geometry_at(&mut ev, &theta, config, &mut rng, &mut sketch, Some(init))?;
    // attribute the initial evaluation to the first geometry
    geometry.calls = ev.calls();
    let mut evaluation = geometry.base.clone();
    let mut iterations = Vec::new();
    let mut deltas: Vec<f64> = Vec::new();
    let mut loss_history = vec![evaluation.loss];
    let mut converged = false;
    let mut carried: Option<Vec<f64>> = None;

    for iteration in 1..=config.n_max {
        let geometry_calls = geometry.calls;
        let outcome = step(
            &mut ev,
            &theta,
            &evaluation,
            &geometry.partition,
            config,
            carried.as_deref(),
        )?;
        debug_assert!(outcome.evaluation.loss <= outcome.loss_before);
        let moved = outcome
            .theta_next
            .iter()
            .zip(&theta)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        // a step cut short by the trust region says nothing about convergence
        let trust_limited = config.trust_radius.is_some_and(|r| moved >= 0.5 * r);
        theta = outcome.theta_next.clone();
        evaluation = outcome.evaluation.clone();
        carried = Some(outcome.sloppy_offset.clone());
        loss_history.push(evaluation.loss);

        let mut diag = IterationDiagnostics {
            iteration,
            loss_before: outcome.loss_before,
            loss_after: evaluation.loss,
            calls: ev.calls(),
            misalignment: None,
            k_s: geometry.partition.k_s,
            k_l: geometry.partition.k_l,
            eigenvalues: geometry.partition.spectrum.eigenvalues.clone(),
            flat: geometry.partition.flat,
            stiff_calls: outcome.stiff_calls,
            realign_calls: outcome.realign_calls,
            sloppy_calls: outcome.sloppy_calls,
            geometry_calls,
        };
        log::info!(
            "iteration {iteration}: loss {:.6e} -> {:.6e}, k_s = {}, k_l = {}, calls = {}",
            outcome.loss_before,
            evaluation.loss,
            diag.k_s,
            diag.k_l,
            ev.calls()
        );

        if ev.remaining() == Some(0) || ev.exhausted() {
            iterations.push(diag);
            break;
        }
        ev.pin(&theta, evaluation.clone());
        let next = geometry_at(
            &mut ev,
            &theta,
            config,
            &mut rng,
            &mut sketch,
            Some(evaluation.clone()),
        )?;
        if ev.exhausted() {
            diag.calls = ev.calls();
            iterations.push(diag);
            break;
        }
        let previous = &geometry.partition.stiff;
        let current = &next.partition.stiff;
        let (delta, same_dim) = if previous.ncols() == 0 || current.ncols() == 0 {
            (1.0, previous.ncols() == current.ncols())
        } else {
            (
                misalignment(previous, current)?,
                previous.ncols() == current.ncols(),
            )
        };
        deltas.push(delta);
        diag.misalignment = Some(delta);
        diag.calls = ev.calls();
        iterations.push(diag);
        geometry = next;

        let window = config.smoothing_window.min(deltas.len());
        let smoothed = deltas[deltas.len() - window..].iter().sum::<f64>() / window as f64;
        if same_dim && smoothed < config.eps_stop && !trust_limited {
            converged = true;
            break;
        }
    }

    let final_spectrum = geometry.partition.spectrum.clone();
    let final_stiff = geometry.partition.stiff.clone();
    let iterations_done = iterations.len();
    Ok(HierarchicalResult {
        theta_final: ParameterVector::new(theta)?,
        loss_final: evaluation.loss,
        iterations: iterations_done,
        converged,
        trace: OptimizationTrace {
            records: ev.into_records(),
            iterations,
        },
        final_spectrum,
        final_stiff,
        misalignment_history: deltas,
        loss_history,
    })
}

/// Post-convergence gradient check at the final iterate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientDiagnostics {
    pub grad_norm: f64,
    /// `‖V_sᵀ g‖ / ‖g‖`, zero when the gradient vanishes.
    pub stiff_fraction: f64,
    pub lambda_max_sloppy: f64,
    /// Norm of the estimated distance to the minimum, `‖H⁺ g‖`.
    pub delta_theta_norm: f64,
    /// `|λ_max sloppy| · ‖H⁺ g‖`, an upper bound on the gradient norm when
    /// the stiff gradient has been eliminated.
    pub bound_rhs: f64,
}

/// Forward-difference gradient `g = Jᵀr` at `result.theta_final` (`n + 1`
/// calls) compared against the sloppy-curvature bound. The distance to the
/// true minimum is unknown, so it is estimated as `H⁺g` with `H` the
/// regularized Gauss-Newton Hessian at the final iterate.
pub fn gradient_diagnostics(
    problem: &ResidualProblem,
    result: &HierarchicalResult,
    config: &HierarchicalConfig,
) -> Result<GradientDiagnostics> {
    let theta = result.theta_final.as_slice();
    let mut ev = Evaluator::new(problem);
    let (j, base) = fd_jacobian(&mut ev, theta, config.fd_step, None, Phase::Geometry)?;
    let g = j.tr_mul(&base.residual);
    let grad_norm = g.norm();

    let stiff_fraction = if grad_norm < 1e-14 || result.final_stiff.ncols() == 0 {
        0.0
    } else {
        result.final_stiff.tr_mul(&g).norm() / grad_norm
    };

    let spectrum = eigendecompose(&gauss_newton_hessian(&j, config.lambda_reg))?;
    let k_s = split_stiff(&spectrum.eigenvalues, config.gamma).unwrap_or(0);
    let lambda_max_sloppy = spectrum.eigenvalues.get(k_s).copied().unwrap_or(0.0);
    let cutoff = spectrum.eigenvalues.first().copied().unwrap_or(0.0) * f64::EPSILON;
    let mut delta = DVector::zeros(theta.len());
    for (i, &l) in spectrum.eigenvalues.iter().enumerate() {
        if l > cutoff {
            let v = spectrum.eigenvectors.column(i);
            delta += v * (v.dot(&g) / l);
        }
    }
    let delta_theta_norm = delta.norm();
    Ok(GradientDiagnostics {
        grad_norm,
        stiff_fraction,
        lambda_max_sloppy,
        delta_theta_norm,
        bound_rhs: lambda_max_sloppy.abs() * delta_theta_norm,
    })
}
