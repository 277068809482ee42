use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solvers::{nelder_mead, InnerSolverOptions};
use crate::types::{BoundsBox, Evaluator, Phase, ResidualProblem};

use super::{check_start, BaselineResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DEConfig {
    /// Number of population members.
    pub pop_size: usize,
    pub max_generations: usize,
    /// Binomial crossover probability.
    pub recombination: f64,
    /// Mutation factor drawn uniformly from this range once per generation.
    pub mutation: (f64, f64),
    pub seed: u64,
    /// Refine the best member with Nelder–Mead after the last generation.
    pub polish: bool,
    /// Evaluation cap for the polish.
    pub polish_evals: usize,
    /// Total objective-evaluation budget.
    pub budget: Option<usize>,
    /// Explicit initial population replacing the Latin hypercube.
    pub init: Option<Vec<Vec<f64>>>,
}

impl Default for DEConfig {
    fn default() -> Self {
        Self {
            pop_size: 15,
            max_generations: 90,
            recombination: 0.7,
            mutation: (0.5, 1.0),
            seed: 42,
            polish: true,
            polish_evals: 1000,
            budget: None,
            init: None,
        }
    }
}

impl DEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pop_size < 4 {
            return Err(Error::InvalidArgument(format!(
                "best1bin needs at least 4 members, got {}",
                self.pop_size
            )));
        }
        if !(0.0..=1.0).contains(&self.recombination) {
            return Err(Error::InvalidArgument(format!(
                "recombination must lie in [0, 1], got {}",
                self.recombination
            )));
        }
        let (lo, hi) = self.mutation;
        if !(lo >= 0.0 && lo <= hi && hi <= 2.0) {
            return Err(Error::InvalidArgument(format!(
                "mutation range must satisfy 0 <= lo <= hi <= 2, got ({lo}, {hi})"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DEOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    /// Objective evaluations made.
    pub evals: usize,
    pub generations: usize,
    /// Best value after initialization and after each generation.
    pub best_history: Vec<f64>,
    /// Population after the last generation.
    pub population: Vec<Vec<f64>>,
}

/// Differential evolution with the `best1bin` scheme:
/// `trial = best + F·(x_r1 − x_r2)`, binomial crossover with one guaranteed
/// coordinate, clipping to `bounds`, greedy selection.
///
/// `objective` receives each generation as one batch so members can be
/// evaluated concurrently; selection then runs in index order. The initial
/// population is a Latin hypercube over `bounds`, with member 0 replaced by
/// `x0` when given. Stops after `max_generations` or when the budget cannot
/// cover another generation.
pub fn differential_evolution<F>(
    mut objective: F,
    bounds: &BoundsBox,
    x0: Option<&[f64]>,
    cfg: &DEConfig,
) -> Result<DEOutcome>
where
    F: FnMut(&[Vec<f64>]) -> Vec<f64>,
{
    cfg.validate()?;
    let n = bounds.dimension();
    if let Some(x) = x0 {
        if x.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: x.len(),
            });
        }
    }
    let budget = cfg.budget.unwrap_or(usize::MAX);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let np = cfg.pop_size;

    let mut population = match &cfg.init {
        Some(init) => {
            if init.len() != np || init.iter().any(|p| p.len() != n) {
                return Err(Error::InvalidArgument(format!(
                    "initial population must be {np} points of dimension {n}"
                )));
            }
            init.clone()
        }
        None => latin_hypercube(bounds, np, &mut rng),
    };
    if let Some(x) = x0 {
        population[0] = x.to_vec();
        bounds.clip(&mut population[0]);
    }
    let take = np.min(budget);
    let mut evals = take;
    let mut fitness = objective(&population[..take]);
    fitness.resize(np, f64::INFINITY);
    for v in fitness.iter_mut() {
        if v.is_nan() {
            *v = f64::INFINITY;
        }
    }
    let mut best = argmin(&fitness);
    let mut best_history = vec![fitness[best]];
    let mut generations = 0;

    while generations < cfg.max_generations && evals + np <= budget {
        generations += 1;
        let f_scale = rng.random_range(cfg.mutation.0..=cfg.mutation.1);
        let trials: Vec<Vec<f64>> = (0..np)
            .map(|i| {
                let (r1, r2) = pick_two(np, i, best, &mut rng);
                let j_rand = rng.random_range(0..n);
                let mut trial = population[i].clone();
                for j in 0..n {
                    if j == j_rand || rng.random::<f64>() < cfg.recombination {
                        trial[j] =
                            population[best][j] + f_scale * (population[r1][j] - population[r2][j]);
                    }
                }
                bounds.clip(&mut trial);
                trial
            })
            .collect();
        let values = objective(&trials);
        evals += np;
        for (i, (trial, v)) in trials.into_iter().zip(values).enumerate() {
            let v = if v.is_nan() { f64::INFINITY } else { v };
            if v <= fitness[i] {
                population[i] = trial;
                fitness[i] = v;
                if v < fitness[best] {
                    best = i;
                }
            }
        }
        best_history.push(fitness[best]);
    }

    let mut x = population[best].clone();
    let mut f = fitness[best];
    if cfg.polish && evals < budget {
        let opts =
            InnerSolverOptions::default().with_max_evals(cfg.polish_evals.min(budget - evals));
        let mut polish_evals = 0;
        let polished = nelder_mead(
            |p| {
                polish_evals += 1;
                let mut q = p.to_vec();
                bounds.clip(&mut q);
                objective(&[q]).pop().unwrap_or(f64::INFINITY)
            },
            &x,
            &opts,
        );
        evals += polish_evals;
        if polished.f < f {
            x = polished.x;
            bounds.clip(&mut x);
            f = polished.f;
        }
    }

    Ok(DEOutcome {
        x,
        f,
        evals,
        generations,
        best_history,
        population,
    })
}

/// [`differential_evolution`] on a residual problem, recording every
/// simulator call.
pub fn differential_evolution_problem(
    problem: &ResidualProblem,
    bounds: &BoundsBox,
    theta0: Option<&[f64]>,
    cfg: &DEConfig,
) -> Result<BaselineResult> {
    if let Some(t) = theta0 {
        check_start(problem, t)?;
    }
    let mut ev = Evaluator::new(problem).with_budget(cfg.budget);
    let outcome = differential_evolution(
        |batch| {
            ev.evaluate_batch(batch, Phase::Baseline)
                .into_iter()
                .map(|e| e.loss)
                .collect()
        },
        bounds,
        theta0,
        cfg,
    )?;
    Ok(BaselineResult {
        theta: outcome.x,
        loss: outcome.f,
        iterations: outcome.generations,
        converged: false,
        records: ev.into_records(),
    })
}

fn argmin(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map_or(0, |(i, _)| i)
}

/// Two distinct indices, both different from `target` and `best`.
fn pick_two(np: usize, target: usize, best: usize, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let mut pool: Vec<usize> = (0..np).filter(|&i| i != target && i != best).collect();
    if pool.len() < 2 {
        pool = (0..np).filter(|&i| i != target).collect();
    }
    let picked: Vec<usize> = pool.choose_multiple(rng, 2).copied().collect();
    (picked[0], picked[1])
}

/// One point per stratum along every axis, strata shuffled independently.
fn latin_hypercube(bounds: &BoundsBox, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = bounds.dimension();
    let mut points = vec![vec![0.0; n]; count];
    for j in 0..n {
        let mut strata: Vec<usize> = (0..count).collect();
        strata.shuffle(rng);
        for (i, s) in strata.into_iter().enumerate() {
            let u = (s as f64 + rng.random::<f64>()) / count as f64;
            points[i][j] = bounds.lower[j] + u * bounds.width(j);
        }
    }
    points
}
