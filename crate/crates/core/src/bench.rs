//! Sample-efficiency benchmarks: several optimizers started from one shared
//! point under one call budget, with optional held-out test loss.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    differential_evolution_problem, full_space_nelder_mead, full_space_powell,
    levenberg_marquardt_fd, BaselineResult, DEConfig, LmConfig,
};
use crate::error::{Error, Result};
use crate::hierarchical::{self, HierarchicalConfig, Strategy};
use crate::loss::Dataset;
use crate::models::{
    generate_synthetic_dataset, DatasetProblem, KineticsConstants, ObservableModel,
    PrescribedSpectrumQuadratic, SumOfExponentials, ToySurfaceKinetics,
};
use crate::solvers::InnerSolverOptions;
use crate::types::{to_normalized, BoundsBox, EvaluationRecord, ResidualProblem, Simulator};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExponentialsSpec {
    pub n: usize,
    pub samples: usize,
    pub t_min: f64,
    pub t_max: f64,
    pub rate_max: f64,
    pub noise: f64,
    pub data_seed: u64,
    /// Load observations from this file instead of generating them.
    pub dataset: Option<String>,
}

impl Default for ExponentialsSpec {
    fn default() -> Self {
        Self {
            n: 29,
            samples: 60,
            t_min: 0.1,
            t_max: 4.0,
            rate_max: SumOfExponentials::DEFAULT_RATE_MAX,
            noise: 0.0,
            data_seed: 0,
            dataset: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadraticSpec {
    pub n: usize,
    pub decades: f64,
    pub seed: u64,
}

impl Default for QuadraticSpec {
    fn default() -> Self {
        Self {
            n: 10,
            decades: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KineticsSpec {
    pub pressures: usize,
    pub temperatures: usize,
    pub noise: f64,
    pub data_seed: u64,
    pub constants: KineticsConstants,
    pub dataset: Option<String>,
}

impl Default for KineticsSpec {
    fn default() -> Self {
        Self {
            pressures: 15,
            temperatures: 15,
            noise: 0.0,
            data_seed: 0,
            constants: KineticsConstants::default(),
            dataset: None,
        }
    }
}

/// A built-in problem and where its data come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ProblemSpec {
    SumOfExponentials(ExponentialsSpec),
    Quadratic(QuadraticSpec),
    ToyKinetics(KineticsSpec),
}

impl Default for ProblemSpec {
    fn default() -> Self {
        ProblemSpec::SumOfExponentials(ExponentialsSpec::default())
    }
}

impl ProblemSpec {
    pub fn id(&self) -> &'static str {
        match self {
            ProblemSpec::SumOfExponentials(_) => "sum_of_exponentials",
            ProblemSpec::Quadratic(_) => "quadratic",
            ProblemSpec::ToyKinetics(_) => "toy_kinetics",
        }
    }

    pub fn build(&self) -> Result<ProblemInstance> {
        match self {
            ProblemSpec::SumOfExponentials(s) => {
                let model = Arc::new(SumOfExponentials::new(s.n, s.rate_max)?);
                let reference = model.reference_theta();
                let dataset = match &s.dataset {
                    Some(path) => Dataset::load(path)?,
                    None => {
                        let times = SumOfExponentials::sample_times(s.samples, s.t_min, s.t_max);
                        generate_synthetic_dataset(
                            model.as_ref(),
                            &reference,
                            &times,
                            s.noise,
                            s.data_seed,
                        )?
                    }
                };
                ProblemInstance::from_model(self.id(), model, dataset, reference)
            }
            ProblemSpec::Quadratic(s) => {
                let q = PrescribedSpectrumQuadratic::new(s.n, s.decades, s.seed)?;
                let reference = q.theta_star().to_vec();
                Ok(ProblemInstance {
                    id: self.id().into(),
                    parameter_names: (0..s.n).map(|i| format!("x{}", i + 1)).collect(),
                    bounds: BoundsBox::unit(s.n),
                    reference,
                    model: None,
                    dataset: None,
                    simulator: Arc::new(q),
                })
            }
            ProblemSpec::ToyKinetics(s) => {
                let model = Arc::new(ToySurfaceKinetics::new(s.constants.clone()));
                let reference = to_normalized(
                    &ToySurfaceKinetics::default_parameters().to_vec(),
                    model.bounds(),
                )?;
                let dataset = match &s.dataset {
                    Some(path) => Dataset::load(path)?,
                    None => {
                        let grid = ToySurfaceKinetics::condition_grid(s.pressures, s.temperatures);
                        generate_synthetic_dataset(
                            model.as_ref(),
                            &reference,
                            &grid,
                            s.noise,
                            s.data_seed,
                        )?
                    }
                };
                ProblemInstance::from_model(self.id(), model, dataset, reference)
            }
        }
    }
}

/// A ready-to-run problem in normalized coordinates.
#[derive(Clone)]
pub struct ProblemInstance {
    pub id: String,
    pub parameter_names: Vec<String>,
    /// Physical parameter ranges.
    pub bounds: BoundsBox,
    /// Normalized parameters that generated the data, or the model defaults.
    pub reference: Vec<f64>,
    pub model: Option<Arc<dyn ObservableModel>>,
    pub dataset: Option<Dataset>,
    simulator: Arc<dyn Simulator>,
}

impl std::fmt::Debug for ProblemInstance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProblemInstance")
            .field("id", &self.id)
            .field("dimension", &self.dimension())
            .field("conditions", &self.dataset.as_ref().map(Dataset::len))
            .finish()
    }
}

impl ProblemInstance {
    pub fn from_model(
        id: &str,
        model: Arc<dyn ObservableModel>,
        dataset: Dataset,
        reference: Vec<f64>,
    ) -> Result<Self> {
        let simulator = Arc::new(DatasetProblem::new(Arc::clone(&model), dataset.clone())?);
        Ok(Self {
            id: id.into(),
            parameter_names: model.parameter_names(),
            bounds: model.bounds().clone(),
            reference,
            model: Some(model),
            dataset: Some(dataset),
            simulator,
        })
    }

    pub fn dimension(&self) -> usize {
        self.simulator.dimension()
    }

    /// A fresh residual problem with its own call counter.
    pub fn problem(&self) -> ResidualProblem {
        ResidualProblem::from_arc(Arc::clone(&self.simulator))
    }

    /// The same model fitted against `dataset`.
    pub fn with_dataset(&self, dataset: Dataset) -> Result<Self> {
        let model = self.model.clone().ok_or_else(|| {
            Error::InvalidArgument(format!("problem '{}' has no dataset to replace", self.id))
        })?;
        Self::from_model(&self.id, model, dataset, self.reference.clone())
    }
}

/// How the shared starting point is chosen, in normalized coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StartSpec {
    Reference,
    /// `θ_i = θ_ref,i · exp(σ z_i)` with standard normal `z`, clipped to the
    /// unit box.
    Perturbed {
        sigma: f64,
        seed: u64,
    },
    Uniform {
        low: f64,
        high: f64,
        seed: u64,
    },
    Explicit {
        theta: Vec<f64>,
    },
}

impl Default for StartSpec {
    fn default() -> Self {
        StartSpec::Perturbed {
            sigma: 0.5,
            seed: 2024,
        }
    }
}

impl StartSpec {
    pub fn resolve(&self, instance: &ProblemInstance) -> Result<Vec<f64>> {
        let n = instance.dimension();
        let theta = match self {
            StartSpec::Reference => instance.reference.clone(),
            StartSpec::Perturbed { sigma, seed } => {
                if !(*sigma >= 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "sigma must be non-negative, got {sigma}"
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                instance
                    .reference
                    .iter()
                    .map(|r| {
                        (r * (sigma * rng.sample::<f64, _>(StandardNormal)).exp()).clamp(0.0, 1.0)
                    })
                    .collect()
            }
            StartSpec::Uniform { low, high, seed } => {
                if !(low < high) {
                    return Err(Error::InvalidArgument(format!(
                        "empty range [{low}, {high})"
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                (0..n).map(|_| rng.random_range(*low..*high)).collect()
            }
            StartSpec::Explicit { theta } => theta.clone(),
        };
        if theta.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: theta.len(),
            });
        }
        Ok(theta)
    }
}

/// Stratified train/test split over binned condition inputs.
///
/// The first two input axes are each cut into `bins` groups of roughly equal
/// numbers of distinct values. Every stratum keeps `⌈fraction·size⌉` items
/// for training. Strata with fewer than two members join the nearest stratum
/// in bin space.
pub fn split_dataset(
    dataset: &Dataset,
    fraction: f64,
    seed: u64,
    bins: (usize, usize),
) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    if bins.0 == 0 || bins.1 == 0 {
        return Err(Error::InvalidArgument(
            "need at least one bin per axis".into(),
        ));
    }
    let keys = stratum_keys(dataset, bins);
    let mut strata: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, k) in keys.into_iter().enumerate() {
        strata.entry(k).or_default().push(i);
    }
    merge_small_strata(&mut strata);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for members in strata.values() {
        let mut members = members.clone();
        members.shuffle(&mut rng);
        // a small allowance keeps products like 0.8·25 from rounding up
        let keep = ((fraction * members.len() as f64) - 1e-9).ceil() as usize;
        train.extend_from_slice(&members[..keep]);
        test.extend_from_slice(&members[keep..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((dataset.subset(&train), dataset.subset(&test)))
}

fn stratum_keys(dataset: &Dataset, bins: (usize, usize)) -> Vec<(usize, usize)> {
    let axis_bins = |axis: usize, count: usize| -> Vec<usize> {
        if axis >= dataset.input_names.len() {
            return vec![0; dataset.len()];
        }
        let mut distinct: Vec<f64> = dataset.conditions.iter().map(|c| c.inputs[axis]).collect();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        dataset
            .conditions
            .iter()
            .map(|c| {
                let rank = distinct
                    .binary_search_by(|v| v.total_cmp(&c.inputs[axis]))
                    .unwrap_or(0);
                rank * count / distinct.len()
            })
            .collect()
    };
    let a = axis_bins(0, bins.0);
    let b = axis_bins(1, bins.1);
    a.into_iter().zip(b).collect()
}

fn merge_small_strata(strata: &mut BTreeMap<(usize, usize), Vec<usize>>) {
    loop {
        let Some(small) = strata.iter().find(|(_, m)| m.len() < 2).map(|(k, _)| *k) else {
            return;
        };
        let dist = |a: (usize, usize), b: (usize, usize)| {
            let dx = a.0 as f64 - b.0 as f64;
            let dy = a.1 as f64 - b.1 as f64;
            dx * dx + dy * dy
        };
        let target = strata
            .keys()
            .filter(|k| **k != small)
            .min_by(|x, y| dist(**x, small).total_cmp(&dist(**y, small)))
            .copied();
        let Some(target) = target else {
            return;
        };
        let members = strata.remove(&small).unwrap_or_default();
        strata.entry(target).or_default().extend(members);
    }
}

/// One optimizer entry of a benchmark plan. The plan's budget and seed
/// override any budget or seed set here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum OptimizerSpec {
    Hierarchical(HierarchicalConfig),
    NelderMead(InnerSolverOptions),
    Powell(InnerSolverOptions),
    DifferentialEvolution(DEConfig),
    LevenbergMarquardt(LmConfig),
}

impl OptimizerSpec {
    /// File-name-safe label, unique within a sensible plan.
    pub fn label(&self) -> String {
        match self {
            OptimizerSpec::Hierarchical(c) => match (c.strategy, c.sketch_k) {
                (Strategy::Stochastic, Some(k)) => format!("hierarchical_stochastic_k{k}"),
                (s, _) => format!("hierarchical_{}", s.as_str()),
            },
            OptimizerSpec::NelderMead(_) => "nelder_mead".into(),
            OptimizerSpec::Powell(_) => "powell".into(),
            OptimizerSpec::DifferentialEvolution(_) => "differential_evolution".into(),
            OptimizerSpec::LevenbergMarquardt(_) => "levenberg_marquardt".into(),
        }
    }

    /// Runs on `problem` from `theta0`, returning every simulator call made
    /// and whether the optimizer reported convergence.
    pub fn run(
        &self,
        problem: &ResidualProblem,
        theta0: &[f64],
        budget: usize,
        seed: u64,
    ) -> Result<(Vec<EvaluationRecord>, bool)> {
        let n = problem.dimension();
        let baseline = |r: BaselineResult| (r.records, r.converged);
        Ok(match self {
            OptimizerSpec::Hierarchical(c) => {
                let cfg = c.clone().with_seed(seed).with_budget(Some(budget));
                let r = hierarchical::run(problem, theta0, &cfg)?;
                (r.trace.records, r.converged)
            }
            OptimizerSpec::NelderMead(o) => {
                baseline(full_space_nelder_mead(problem, theta0, budget, o)?)
            }
            OptimizerSpec::Powell(o) => baseline(full_space_powell(problem, theta0, budget, o)?),
            OptimizerSpec::DifferentialEvolution(c) => {
                let cfg = DEConfig {
                    seed,
                    budget: Some(budget),
                    ..c.clone()
                };
                baseline(differential_evolution_problem(
                    problem,
                    &BoundsBox::unit(n),
                    Some(theta0),
                    &cfg,
                )?)
            }
            OptimizerSpec::LevenbergMarquardt(c) => {
                let cfg = LmConfig {
                    budget: Some(budget),
                    ..c.clone()
                };
                baseline(levenberg_marquardt_fd(
                    problem,
                    theta0,
                    Some(&BoundsBox::unit(n)),
                    &cfg,
                )?)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    /// Fraction of each stratum used for training.
    pub fraction: f64,
    pub seed: u64,
    pub bins: (usize, usize),
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            fraction: 0.8,
            seed: 0,
            bins: (3, 3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkPlan {
    pub problem: ProblemSpec,
    pub start: StartSpec,
    pub optimizers: Vec<OptimizerSpec>,
    pub budget: usize,
    pub seeds: Vec<u64>,
    /// Hold out part of the dataset and track the test loss.
    pub split: Option<SplitSpec>,
    pub checkpoint_every: usize,
    /// Threshold for calls-to-threshold, as a fraction of the starting loss.
    pub threshold_fraction: f64,
}

impl Default for BenchmarkPlan {
    fn default() -> Self {
        Self {
            problem: ProblemSpec::default(),
            start: StartSpec::default(),
            optimizers: Vec::new(),
            budget: 1500,
            seeds: (0..5).collect(),
            split: None,
            checkpoint_every: 25,
            threshold_fraction: 0.1,
        }
    }
}

impl BenchmarkPlan {
    pub fn validate(&self) -> Result<()> {
        if self.optimizers.is_empty() {
            return Err(Error::InvalidArgument(
                "benchmark plan lists no optimizers".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument(
                "benchmark plan lists no seeds".into(),
            ));
        }
        if self.budget == 0 || self.checkpoint_every == 0 {
            return Err(Error::InvalidArgument(
                "budget and checkpoint interval must be positive".into(),
            ));
        }
        if !(self.threshold_fraction > 0.0) {
            return Err(Error::InvalidArgument(
                "threshold fraction must be positive".into(),
            ));
        }
        let mut labels: Vec<String> = self.optimizers.iter().map(OptimizerSpec::label).collect();
        labels.sort();
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument(format!(
                "optimizer '{}' listed twice",
                w[0]
            )));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::InvalidArgument("duplicate seeds in plan".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub call_index: usize,
    /// Test loss at the best training point found so far.
    pub test_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub optimizer: String,
    pub seed: u64,
    /// Error message when the optimizer did not finish.
    pub failure: Option<String>,
    pub converged: bool,
    pub records: Vec<EvaluationRecord>,
    pub checkpoints: Vec<Checkpoint>,
}

impl RunOutcome {
    pub fn calls(&self) -> usize {
        self.records.len()
    }

    pub fn best_train_loss(&self) -> Option<f64> {
        self.records.iter().map(|r| r.loss).min_by(f64::total_cmp)
    }

    pub fn final_test_loss(&self) -> Option<f64> {
        self.checkpoints.last().map(|c| c.test_loss)
    }

    /// Calls made when the training loss first reached `threshold`.
    pub fn calls_to_threshold(&self, threshold: f64) -> Option<usize> {
        self.records
            .iter()
            .position(|r| r.loss <= threshold)
            .map(|i| i + 1)
    }

    pub fn trace_csv(&self) -> String {
        let mut out = String::from("call_index,phase,train_loss\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{}", r.call_index, r.phase, r.loss);
        }
        out
    }

    pub fn checkpoints_csv(&self) -> String {
        let mut out = String::from("call_index,test_loss\n");
        for c in &self.checkpoints {
            let _ = writeln!(out, "{},{}", c.call_index, c.test_loss);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub failed: bool,
    pub failure: Option<String>,
    pub converged: bool,
    pub calls: usize,
    pub final_train_loss: Option<f64>,
    pub final_test_loss: Option<f64>,
    pub calls_to_threshold: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSummary {
    pub optimizer: String,
    /// Median over seeds; runs that never reach the threshold count as
    /// infinitely slow, so this is absent when most runs miss it.
    pub median_calls_to_threshold: Option<f64>,
    pub median_final_train_loss: Option<f64>,
    pub median_final_test_loss: Option<f64>,
    pub runs: Vec<RunSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub problem: String,
    pub dimension: usize,
    pub budget: usize,
    pub theta0: Vec<f64>,
    pub initial_train_loss: f64,
    pub initial_test_loss: Option<f64>,
    pub threshold: f64,
    pub train_size: Option<usize>,
    pub test_size: Option<usize>,
    pub optimizers: Vec<OptimizerSummary>,
}

#[derive(Debug, Clone)]
pub struct BenchmarkBundle {
    pub runs: Vec<RunOutcome>,
    pub summary: BenchmarkSummary,
}

impl BenchmarkBundle {
    pub fn run(&self, optimizer: &str, seed: u64) -> Option<&RunOutcome> {
        self.runs
            .iter()
            .find(|r| r.optimizer == optimizer && r.seed == seed)
    }

    /// Writes `trace_<optimizer>_seed<seed>.csv` per run, matching
    /// `checkpoints_*.csv` files when a test set exists, and `summary.json`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: String, text: String| -> Result<()> {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
        };
        for r in &self.runs {
            write(
                format!("trace_{}_seed{}.csv", r.optimizer, r.seed),
                r.trace_csv(),
            )?;
            if self.summary.test_size.is_some() {
                write(
                    format!("checkpoints_{}_seed{}.csv", r.optimizer, r.seed),
                    r.checkpoints_csv(),
                )?;
            }
        }
        write(
            "summary.json".into(),
            serde_json::to_string_pretty(&self.summary)? + "\n",
        )
    }
}

/// Median with missing values ordered after every present one.
fn median_of(values: &[Option<f64>]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v: Vec<f64> = values.iter().map(|x| x.unwrap_or(f64::INFINITY)).collect();
    v.sort_by(f64::total_cmp);
    let m = v.len();
    let med = if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    };
    med.is_finite().then_some(med)
}

/// Test loss at the incumbent every `every` calls and after the last call.
fn checkpoints(
    records: &[EvaluationRecord],
    test: &ResidualProblem,
    every: usize,
) -> Vec<Checkpoint> {
    let mut out = Vec::new();
    let mut best: Option<&EvaluationRecord> = None;
    for (i, r) in records.iter().enumerate() {
        if best.is_none_or(|b| r.loss < b.loss) {
            best = Some(r);
        }
        let calls = i + 1;
        if calls % every == 0 || calls == records.len() {
            if let Some(b) = best {
                out.push(Checkpoint {
                    call_index: calls,
                    test_loss: test.evaluate(b.theta.as_slice()).loss,
                });
            }
        }
    }
    out
}

/// Runs every (optimizer, seed) pair of `plan` on the training loss. Runs
/// execute in parallel and each gets its own call counter. Test-set
/// evaluations go through a separate problem, so they never count against
/// the budget.
pub fn run_benchmark(plan: &BenchmarkPlan) -> Result<BenchmarkBundle> {
    plan.validate()?;
    let full = plan.problem.build()?;
    let theta0 = plan.start.resolve(&full)?;
    let (train, test) = match (&plan.split, &full.dataset) {
        (Some(s), Some(ds)) => {
            let (tr, te) = split_dataset(ds, s.fraction, s.seed, s.bins)?;
            if te.is_empty() {
                return Err(Error::InvalidArgument(
                    "split left the test set empty".into(),
                ));
            }
            (full.with_dataset(tr)?, Some(full.with_dataset(te)?))
        }
        (Some(_), None) => {
            return Err(Error::InvalidArgument(format!(
                "problem '{}' has no dataset to split",
                full.id
            )))
        }
        (None, _) => (full.clone(), None),
    };

    let start = train.problem().evaluate(&theta0);
    if start.failed {
        return Err(Error::Simulation(
            "simulator failed at the starting point".into(),
        ));
    }
    let threshold = plan.threshold_fraction * start.loss;
    let initial_test_loss = test.as_ref().map(|t| t.problem().evaluate(&theta0).loss);

    let jobs: Vec<(&OptimizerSpec, u64)> = plan
        .optimizers
        .iter()
        .flat_map(|o| plan.seeds.iter().map(move |&s| (o, s)))
        .collect();
    let runs: Vec<RunOutcome> = jobs
        .par_iter()
        .map(|&(spec, seed)| {
            let problem = train.problem();
            let label = spec.label();
            let attempt = catch_unwind(AssertUnwindSafe(|| {
                spec.run(&problem, &theta0, plan.budget, seed)
            }));
            let ((records, converged), failure) = match attempt {
                Ok(Ok(out)) => (out, None),
                Ok(Err(e)) => ((Vec::new(), false), Some(e.to_string())),
                Err(_) => ((Vec::new(), false), Some("optimizer panicked".to_string())),
            };
            if let Some(msg) = &failure {
                log::warn!("{label} seed {seed} failed: {msg}");
            }
            let checkpoints = match &test {
                Some(t) => checkpoints(&records, &t.problem(), plan.checkpoint_every),
                None => Vec::new(),
            };
            RunOutcome {
                optimizer: label,
                seed,
                failure,
                converged,
                records,
                checkpoints,
            }
        })
        .collect();

    let optimizers = plan
        .optimizers
        .iter()
        .map(|spec| {
            let label = spec.label();
            let runs: Vec<RunSummary> = runs
                .iter()
                .filter(|r| r.optimizer == label)
                .map(|r| RunSummary {
                    seed: r.seed,
                    failed: r.failure.is_some(),
                    failure: r.failure.clone(),
                    converged: r.converged,
                    calls: r.calls(),
                    final_train_loss: r.best_train_loss(),
                    final_test_loss: r.final_test_loss(),
                    calls_to_threshold: r.calls_to_threshold(threshold),
                })
                .collect();
            let pick = |f: &dyn Fn(&RunSummary) -> Option<f64>| -> Vec<Option<f64>> {
                runs.iter().map(f).collect()
            };
            OptimizerSummary {
                optimizer: label,
                median_calls_to_threshold: median_of(&pick(&|r| {
                    r.calls_to_threshold.map(|c| c as f64)
                })),
                median_final_train_loss: median_of(&pick(&|r| r.final_train_loss)),
                median_final_test_loss: median_of(&pick(&|r| r.final_test_loss)),
                runs,
            }
        })
        .collect();

    Ok(BenchmarkBundle {
        summary: BenchmarkSummary {
            problem: full.id.clone(),
            dimension: full.dimension(),
            budget: plan.budget,
            theta0,
            initial_train_loss: start.loss,
            initial_test_loss,
            threshold,
            train_size: test.as_ref().and(train.dataset.as_ref().map(Dataset::len)),
            test_size: test
                .as_ref()
                .and_then(|t| t.dataset.as_ref().map(Dataset::len)),
            optimizers,
        },
        runs,
    })
}
