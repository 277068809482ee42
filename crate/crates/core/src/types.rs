//! Shared domain types: normalized parameter vectors, bounds, the residual
//! problem interface, and the call-counting evaluator every optimizer
//! records through.

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::objective;

/// Loss reported for evaluations whose residuals are not finite or whose
/// simulator returned an error.
pub const SENTINEL_LOSS: f64 = 1e12;

/// A point in normalized parameter coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("parameter vector is empty".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "parameter {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Deref for ParameterVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Axis-aligned box mapping normalized `[0, 1]` coordinates to physical values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoundsBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo < hi) {
                return Err(Error::InvalidArgument(format!(
                    "bounds[{i}]: lower {lo} must be below upper {hi}"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn unit(n: usize) -> Self {
        Self {
            lower: vec![0.0; n],
            upper: vec![1.0; n],
        }
    }

    pub fn dimension(&self) -> usize {
        self.lower.len()
    }

    pub fn width(&self, i: usize) -> f64 {
        self.upper[i] - self.lower[i]
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dimension()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    pub fn clip(&self, x: &mut [f64]) {
        for (v, (lo, hi)) in x.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *v = v.clamp(*lo, *hi);
        }
    }
}

pub fn to_physical(theta: &[f64], bounds: &BoundsBox) -> Result<Vec<f64>> {
    if theta.len() != bounds.dimension() {
        return Err(Error::DimensionMismatch {
            expected: bounds.dimension(),
            got: theta.len(),
        });
    }
    Ok(theta
        .iter()
        .zip(bounds.lower.iter().zip(&bounds.upper))
        .map(|(t, (lo, hi))| lo + t * (hi - lo))
        .collect())
}

pub fn to_normalized(physical: &[f64], bounds: &BoundsBox) -> Result<Vec<f64>> {
    if physical.len() != bounds.dimension() {
        return Err(Error::DimensionMismatch {
            expected: bounds.dimension(),
            got: physical.len(),
        });
    }
    Ok(physical
        .iter()
        .zip(bounds.lower.iter().zip(&bounds.upper))
        .map(|(p, (lo, hi))| (p - lo) / (hi - lo))
        .collect())
}

/// Elementwise absolute value. Keeps normalized coordinates non-negative for
/// the unconstrained inner solvers.
pub fn reflect_nonnegative(theta: &[f64]) -> Vec<f64> {
    theta.iter().map(|v| v.abs()).collect()
}

/// A deterministic simulator mapping normalized parameters to a stacked
/// residual vector.
///
/// Implementations must be pure: the same `theta` always yields the same
/// residuals, and concurrent calls at distinct points are allowed.
pub trait Simulator: Send + Sync {
    fn dimension(&self) -> usize;
    fn residual_len(&self) -> usize;
    fn residuals(&self, theta: &[f64]) -> Result<DVector<f64>>;
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    /// Empty when `failed`.
    pub residual: DVector<f64>,
    pub loss: f64,
    pub failed: bool,
}

impl Evaluation {
    fn failure(loss: f64) -> Self {
        Self {
            residual: DVector::zeros(0),
            loss,
            failed: true,
        }
    }
}

/// A simulator plus an atomic count of how many times it has been run.
pub struct ResidualProblem {
    simulator: Arc<dyn Simulator>,
    calls: AtomicUsize,
}

impl fmt::Debug for ResidualProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ResidualProblem")
            .field("dimension", &self.dimension())
            .field("residual_len", &self.residual_len())
            .field("calls", &self.calls())
            .finish()
    }
}

impl ResidualProblem {
    pub fn new(simulator: impl Simulator + 'static) -> Self {
        Self::from_arc(Arc::new(simulator))
    }

    pub fn from_arc(simulator: Arc<dyn Simulator>) -> Self {
        Self {
            simulator,
            calls: AtomicUsize::new(0),
        }
    }

    /// A fresh problem sharing the same simulator, with its own counter.
    pub fn fork(&self) -> Self {
        Self::from_arc(Arc::clone(&self.simulator))
    }

    pub fn dimension(&self) -> usize {
        self.simulator.dimension()
    }

    pub fn residual_len(&self) -> usize {
        self.simulator.residual_len()
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn simulator(&self) -> &Arc<dyn Simulator> {
        &self.simulator
    }

    /// Runs the simulator once. Failures and non-finite residuals map to
    /// [`SENTINEL_LOSS`].
    pub fn evaluate(&self, theta: &[f64]) -> Evaluation {
        self.calls.fetch_add(1, Ordering::SeqCst);
        match self.simulator.residuals(theta) {
            Ok(r) if r.iter().all(|v| v.is_finite()) => Evaluation {
                loss: objective(r.as_slice()),
                residual: r,
                failed: false,
            },
            Ok(_) => {
                log::debug!("non-finite residuals, using sentinel loss");
                Evaluation::failure(SENTINEL_LOSS)
            }
            Err(e) => {
                log::debug!("simulator failure: {e}");
                Evaluation::failure(SENTINEL_LOSS)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Init,
    Stiff,
    Realign,
    Sloppy,
    Geometry,
    Baseline,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Init => "init",
            Phase::Stiff => "stiff",
            Phase::Realign => "realign",
            Phase::Sloppy => "sloppy",
            Phase::Geometry => "geometry",
            Phase::Baseline => "baseline",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "init" => Phase::Init,
            "stiff" => Phase::Stiff,
            "realign" => Phase::Realign,
            "sloppy" => Phase::Sloppy,
            "geometry" => Phase::Geometry,
            "baseline" => Phase::Baseline,
            other => return Err(Error::InvalidArgument(format!("unknown phase {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub call_index: usize,
    /// The point actually handed to the simulator (after reflection).
    pub theta: ParameterVector,
    pub loss: f64,
    pub phase: Phase,
}

/// Records every simulator call made on behalf of one optimization run.
///
/// The evaluator owns the budget, applies the non-negativity reflection and
/// holds a single pinned evaluation so a point whose residuals are already
/// known is never simulated twice.
pub struct Evaluator<'p> {
    problem: &'p ResidualProblem,
    reflect: bool,
    budget: Option<usize>,
    records: Vec<EvaluationRecord>,
    pinned: Option<(Vec<f64>, Evaluation)>,
    exhausted: bool,
}

impl<'p> Evaluator<'p> {
    pub fn new(problem: &'p ResidualProblem) -> Self {
        Self {
            problem,
            reflect: true,
            budget: None,
            records: Vec::new(),
            pinned: None,
            exhausted: false,
        }
    }

    pub fn with_budget(mut self, budget: Option<usize>) -> Self {
        self.budget = budget;
        self
    }

    pub fn with_reflection(mut self, reflect: bool) -> Self {
        self.reflect = reflect;
        self
    }

    pub fn problem(&self) -> &ResidualProblem {
        self.problem
    }

    pub fn dimension(&self) -> usize {
        self.problem.dimension()
    }

    /// Simulator calls made through this evaluator.
    pub fn calls(&self) -> usize {
        self.records.len()
    }

    pub fn remaining(&self) -> Option<usize> {
        self.budget.map(|b| b.saturating_sub(self.records.len()))
    }

    /// True once a call was refused because the budget ran out.
    pub fn exhausted(&self) -> bool {
        self.exhausted
    }

    pub fn records(&self) -> &[EvaluationRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<EvaluationRecord> {
        self.records
    }

    /// The point the simulator would see for `theta`.
    pub fn canonical(&self, theta: &[f64]) -> Vec<f64> {
        if self.reflect {
            reflect_nonnegative(theta)
        } else {
            theta.to_vec()
        }
    }

    /// Remember `evaluation` as the known result at `theta`.
    pub fn pin(&mut self, theta: &[f64], evaluation: Evaluation) {
        let point = self.canonical(theta);
        self.pinned = Some((point, evaluation));
    }

    pub fn pinned(&self, theta: &[f64]) -> Option<&Evaluation> {
        let point = self.canonical(theta);
        match &self.pinned {
            Some((p, e)) if *p == point => Some(e),
            _ => None,
        }
    }

    pub fn evaluate(&mut self, theta: &[f64], phase: Phase) -> Evaluation {
        self.evaluate_batch(std::slice::from_ref(&theta.to_vec()), phase)
            .pop()
            .expect("one evaluation per point")
    }

    /// Evaluates several points, concurrently where possible. Records are
    /// appended in input order so traces do not depend on scheduling.
    pub fn evaluate_batch(&mut self, thetas: &[Vec<f64>], phase: Phase) -> Vec<Evaluation> {
        let points: Vec<Vec<f64>> = thetas.iter().map(|t| self.canonical(t)).collect();
        let mut results: Vec<Option<Evaluation>> = points
            .iter()
            .map(|p| match &self.pinned {
                Some((q, e)) if q == p => Some(e.clone()),
                _ => None,
            })
            .collect();

        let mut allowed = self.remaining().unwrap_or(usize::MAX);
        let mut todo = Vec::new();
        for (i, r) in results.iter().enumerate() {
            if r.is_none() {
                if allowed == 0 {
                    self.exhausted = true;
                    continue;
                }
                allowed -= 1;
                todo.push(i);
            }
        }

        let problem = self.problem;
        let computed: Vec<Evaluation> = todo
            .par_iter()
            .map(|&i| problem.evaluate(&points[i]))
            .collect();

        for (i, e) in todo.into_iter().zip(computed) {
            self.records.push(EvaluationRecord {
                call_index: self.records.len(),
                theta: ParameterVector(points[i].clone()),
                loss: e.loss,
                phase,
            });
            results[i] = Some(e);
        }

        results
            .into_iter()
            .map(|r| r.unwrap_or_else(|| Evaluation::failure(f64::INFINITY)))
            .collect()
    }
}
