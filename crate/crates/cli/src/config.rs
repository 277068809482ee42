use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sloppyopt::bench::{BenchmarkPlan, OptimizerSpec, ProblemSpec, StartSpec};
use sloppyopt::hierarchical::{HierarchicalConfig, Strategy};
use sloppyopt::uncertainty::UncertaintyOptions;

use crate::Failure;

/// One optimization, spectrum or uncertainty job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    pub start: StartSpec,
    pub optimizer: OptimizerSpec,
    pub seed: u64,
    /// Simulator-call budget; baselines fall back to
    /// [`DEFAULT_BASELINE_BUDGET`] when unset.
    pub budget: Option<usize>,
    pub output_dir: PathBuf,
    /// Write `uncertainty.json` after `optimize` with these options.
    pub uncertainty: Option<UncertaintyOptions>,
}

pub const DEFAULT_BASELINE_BUDGET: usize = 1500;

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            problem: ProblemSpec::default(),
            start: StartSpec::default(),
            optimizer: OptimizerSpec::Hierarchical(HierarchicalConfig::exact()),
            seed: 0,
            budget: None,
            output_dir: PathBuf::from("out"),
            uncertainty: None,
        }
    }
}

/// Command-line values that replace their config counterparts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub strategy: Option<Strategy>,
    pub k: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub budget: Option<usize>,
    pub no_realign: bool,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::config(format!("invalid config {}: {e}", path.display())))
}

/// Dataset paths inside a config are taken relative to the config file.
fn anchor_dataset(problem: &mut ProblemSpec, base: &Path) {
    let dataset = match problem {
        ProblemSpec::SumOfExponentials(s) => &mut s.dataset,
        ProblemSpec::ToyKinetics(s) => &mut s.dataset,
        ProblemSpec::Quadratic(_) => return,
    };
    if let Some(path) = dataset {
        if Path::new(path).is_relative() {
            *path = base.join(&*path).display().to_string();
        }
    }
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let mut config: RunConfig = read_json(path)?;
        anchor_dataset(&mut config.problem, &config_dir(path));
        Ok(config)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), Failure> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(budget) = o.budget {
            self.budget = Some(budget);
        }
        if let Some(out) = &o.out {
            self.output_dir = out.clone();
        }
        let touches_hierarchical = o.strategy.is_some() || o.k.is_some() || o.no_realign;
        let cfg = match &mut self.optimizer {
            OptimizerSpec::Hierarchical(cfg) => cfg,
            other if touches_hierarchical => return Err(Failure::config(format!(
                "--strategy, --k and --no-realign apply only to the hierarchical optimizer, not {}",
                other.label()
            ))),
            _ => return Ok(()),
        };
        if let Some(strategy) = o.strategy {
            cfg.strategy = strategy;
        }
        if let Some(k) = o.k {
            if cfg.strategy != Strategy::Stochastic {
                return Err(Failure::config("--k requires the stochastic strategy"));
            }
            cfg.sketch_k = Some(k);
        }
        if o.no_realign {
            cfg.realign = false;
        }
        Ok(())
    }
}

pub fn load_plan(path: &Path, o: &Overrides) -> Result<BenchmarkPlan, Failure> {
    let mut plan: BenchmarkPlan = read_json(path)?;
    anchor_dataset(&mut plan.problem, &config_dir(path));
    if o.strategy.is_some() || o.k.is_some() {
        return Err(Failure::config(
            "--strategy and --k do not apply to bench; list optimizers in the plan",
        ));
    }
    if let Some(seed) = o.seed {
        plan.seeds = vec![seed];
    }
    if let Some(budget) = o.budget {
        plan.budget = budget;
    }
    if o.no_realign {
        for spec in &mut plan.optimizers {
            if let OptimizerSpec::Hierarchical(cfg) = spec {
                cfg.realign = false;
            }
        }
    }
    Ok(plan)
}
