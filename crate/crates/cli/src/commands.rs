use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sloppyopt::bench::{run_benchmark, OptimizerSpec, ProblemInstance};
use sloppyopt::hessian::{fd_jacobian, gauss_newton_hessian, DEFAULT_FD_STEP, DEFAULT_LAMBDA_REG};
use sloppyopt::hierarchical::{self, IterationDiagnostics, Strategy};
use sloppyopt::subspace::eigendecompose;
use sloppyopt::types::{to_physical, EvaluationRecord, Evaluator, Phase};
use sloppyopt::uncertainty::{
    parameter_uncertainty, uncertainty_rows, UncertaintyOptions, UncertaintyRow,
};

use crate::config::{load_plan, Overrides, RunConfig, DEFAULT_BASELINE_BUDGET};
use crate::Failure;

/// Contents of `result.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub problem: String,
    pub optimizer: String,
    pub strategy: Option<Strategy>,
    pub k: Option<usize>,
    pub seed: u64,
    pub budget: Option<usize>,
    pub calls: usize,
    pub iterations: Option<usize>,
    pub converged: bool,
    pub parameter_names: Vec<String>,
    pub theta_initial: Vec<f64>,
    /// Normalized coordinates.
    pub theta_final: Vec<f64>,
    pub theta_final_physical: Vec<f64>,
    pub loss_initial: f64,
    pub loss_final: f64,
    pub eigenspectrum: Vec<f64>,
    pub misalignment_history: Vec<f64>,
    pub loss_history: Vec<f64>,
    /// Per outer iteration; empty for baselines.
    pub diagnostics: Vec<IterationDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct SpectrumReport {
    problem: String,
    theta: Vec<f64>,
    loss: f64,
    fd_step: f64,
    eigenvalues: Vec<f64>,
    decades: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct UncertaintyFile {
    problem: String,
    loss: f64,
    lambda_reg: f64,
    fraction: f64,
    delta_phi_threshold: f64,
    parameters: Vec<UncertaintyRow>,
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, Failure> {
    std::fs::create_dir_all(dir).map_err(|e| {
        Failure::config(format!(
            "cannot create output directory {}: {e}",
            dir.display()
        ))
    })?;
    let path = dir.join(name);
    std::fs::write(&path, contents)
        .map_err(|e| Failure::config(format!("cannot write {}: {e}", path.display())))?;
    log::info!("wrote {}", path.display());
    Ok(path)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf, Failure> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| Failure::config(e.to_string()))?;
    text.push('\n');
    write_file(dir, name, &text)
}

fn trace_csv(records: &[EvaluationRecord], names: &[String]) -> String {
    let mut out = String::from("call_index,phase,loss");
    for n in names {
        write!(out, ",{n}").unwrap();
    }
    out.push('\n');
    for r in records {
        write!(out, "{},{},{:e}", r.call_index, r.phase, r.loss).unwrap();
        for v in r.theta.as_slice() {
            write!(out, ",{v:e}").unwrap();
        }
        out.push('\n');
    }
    out
}

fn fd_step_of(optimizer: &OptimizerSpec) -> f64 {
    match optimizer {
        OptimizerSpec::Hierarchical(c) => c.fd_step,
        _ => DEFAULT_FD_STEP,
    }
}

fn lambda_reg_of(optimizer: &OptimizerSpec) -> f64 {
    match optimizer {
        OptimizerSpec::Hierarchical(c) => c.lambda_reg,
        _ => DEFAULT_LAMBDA_REG,
    }
}

/// Normalized point taken from a previous `result.json`, or the configured
/// start.
fn evaluation_point(
    config: &RunConfig,
    instance: &ProblemInstance,
    result: Option<&Path>,
) -> Result<Vec<f64>, Failure> {
    let theta = match result {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Failure::config(format!("cannot read result {}: {e}", path.display()))
            })?;
            let r: RunResult = serde_json::from_str(&text)
                .map_err(|e| Failure::config(format!("invalid result {}: {e}", path.display())))?;
            r.theta_final
        }
        None => config.start.resolve(instance)?,
    };
    if theta.len() != instance.dimension() {
        return Err(Failure::config(format!(
            "point has {} entries but the problem has {} parameters",
            theta.len(),
            instance.dimension()
        )));
    }
    Ok(theta)
}

fn uncertainty_file(
    instance: &ProblemInstance,
    theta: &[f64],
    fd_step: f64,
    lambda_reg: f64,
    options: &UncertaintyOptions,
) -> Result<UncertaintyFile, Failure> {
    let problem = instance.problem();
    let mut ev = Evaluator::new(&problem);
    let (j, base) = fd_jacobian(&mut ev, theta, fd_step, None, Phase::Geometry)?;
    if base.failed {
        return Err(Failure::model("simulator failed at the requested point"));
    }
    let h = gauss_newton_hessian(&j, lambda_reg);
    let report = parameter_uncertainty(&h, base.loss, options)?;
    let parameters = uncertainty_rows(
        &report,
        &instance.parameter_names,
        &instance.bounds,
        &instance.reference,
        theta,
    )?;
    Ok(UncertaintyFile {
        problem: instance.id.clone(),
        loss: base.loss,
        lambda_reg,
        fraction: options.fraction,
        delta_phi_threshold: report.delta_phi_threshold,
        parameters,
    })
}

pub fn optimize(config_path: &Path, overrides: &Overrides) -> Result<(), Failure> {
    let mut config = RunConfig::load(config_path)?;
    config.apply(overrides)?;
    let instance = config.problem.build()?;
    let theta0 = config.start.resolve(&instance)?;
    let problem = instance.problem();
    let names = &instance.parameter_names;

    let (result, records) = match &config.optimizer {
        OptimizerSpec::Hierarchical(h) => {
            let cfg = h.clone().with_seed(config.seed).with_budget(config.budget);
            let r = hierarchical::run(&problem, &theta0, &cfg)?;
            let result = RunResult {
                problem: instance.id.clone(),
                optimizer: config.optimizer.label(),
                strategy: Some(cfg.strategy),
                k: match cfg.strategy {
                    Strategy::Stochastic => cfg.sketch_k,
                    Strategy::Exact => None,
                },
                seed: config.seed,
                budget: config.budget,
                calls: problem.calls(),
                iterations: Some(r.iterations),
                converged: r.converged,
                parameter_names: names.clone(),
                theta_initial: theta0.clone(),
                theta_final: r.theta_final.as_slice().to_vec(),
                theta_final_physical: to_physical(r.theta_final.as_slice(), &instance.bounds)?,
                loss_initial: r.loss_history[0],
                loss_final: r.loss_final,
                eigenspectrum: r.final_spectrum.eigenvalues.clone(),
                misalignment_history: r.misalignment_history.clone(),
                loss_history: r.loss_history.clone(),
                diagnostics: r.trace.iterations.clone(),
            };
            (result, r.trace.records)
        }
        spec => {
            let budget = config.budget.unwrap_or(DEFAULT_BASELINE_BUDGET);
            let (records, converged) = spec.run(&problem, &theta0, budget, config.seed)?;
            let best = records
                .iter()
                .filter(|r| r.loss.is_finite())
                .min_by(|a, b| a.loss.total_cmp(&b.loss))
                .ok_or_else(|| Failure::model("optimizer made no successful simulator call"))?;
            let theta_final = best.theta.as_slice().to_vec();
            let result = RunResult {
                problem: instance.id.clone(),
                optimizer: spec.label(),
                strategy: None,
                k: None,
                seed: config.seed,
                budget: Some(budget),
                calls: records.len(),
                iterations: None,
                converged,
                parameter_names: names.clone(),
                theta_initial: theta0.clone(),
                theta_final_physical: to_physical(&theta_final, &instance.bounds)?,
                theta_final,
                loss_initial: records[0].loss,
                loss_final: best.loss,
                eigenspectrum: Vec::new(),
                misalignment_history: Vec::new(),
                loss_history: Vec::new(),
                diagnostics: Vec::new(),
            };
            (result, records)
        }
    };

    let dir = &config.output_dir;
    write_file(dir, "trace.csv", &trace_csv(&records, names))?;
    write_json(dir, "result.json", &result)?;
    if let Some(options) = &config.uncertainty {
        let file = uncertainty_file(
            &instance,
            &result.theta_final,
            fd_step_of(&config.optimizer),
            lambda_reg_of(&config.optimizer),
            options,
        )?;
        write_json(dir, "uncertainty.json", &file)?;
    }
    println!(
        "{}: loss {:.6e} -> {:.6e} in {} calls, converged {}",
        result.optimizer, result.loss_initial, result.loss_final, result.calls, result.converged
    );
    Ok(())
}

pub fn bench(plan_path: &Path, overrides: &Overrides) -> Result<(), Failure> {
    let plan = load_plan(plan_path, overrides)?;
    plan.validate()?;
    let bundle = run_benchmark(&plan)?;
    let dir = overrides
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("out"));
    bundle
        .write(&dir)
        .map_err(|e| Failure::config(format!("cannot write bundle to {}: {e}", dir.display())))?;
    for s in &bundle.summary.optimizers {
        let fmt = |v: Option<f64>| v.map_or("none".to_string(), |x| format!("{x:.4e}"));
        println!(
            "{:<32} median calls to threshold {:>8}  median final loss {}",
            s.optimizer,
            s.median_calls_to_threshold
                .map_or("none".to_string(), |c| c.to_string()),
            fmt(s.median_final_train_loss),
        );
    }
    let failed = bundle.runs.iter().filter(|r| r.failure.is_some()).count();
    if failed > 0 {
        log::warn!("{failed} run(s) failed; see summary.json");
    }
    Ok(())
}

pub fn spectrum(
    config_path: &Path,
    overrides: &Overrides,
    result: Option<&Path>,
) -> Result<(), Failure> {
    let mut config = RunConfig::load(config_path)?;
    config.apply(overrides)?;
    let instance = config.problem.build()?;
    let theta = evaluation_point(&config, &instance, result)?;
    let fd_step = fd_step_of(&config.optimizer);
    let problem = instance.problem();
    let mut ev = Evaluator::new(&problem);
    let (j, base) = fd_jacobian(&mut ev, &theta, fd_step, None, Phase::Geometry)?;
    if base.failed {
        return Err(Failure::model("simulator failed at the requested point"));
    }
    let spectrum = eigendecompose(&gauss_newton_hessian(&j, 0.0))?;
    let report = SpectrumReport {
        problem: instance.id.clone(),
        theta,
        loss: base.loss,
        fd_step,
        decades: spectrum.decades(),
        eigenvalues: spectrum.eigenvalues,
    };
    let mut csv = String::from("index,eigenvalue\n");
    for (i, l) in report.eigenvalues.iter().enumerate() {
        writeln!(csv, "{},{l:e}", i + 1).unwrap();
    }
    write_json(&config.output_dir, "spectrum.json", &report)?;
    write_file(&config.output_dir, "spectrum.csv", &csv)?;
    println!(
        "{} eigenvalues spanning {:.2} decades",
        report.eigenvalues.len(),
        report.decades
    );
    Ok(())
}

pub fn uncertainty(
    config_path: &Path,
    overrides: &Overrides,
    result: Option<&Path>,
) -> Result<(), Failure> {
    let mut config = RunConfig::load(config_path)?;
    config.apply(overrides)?;
    let instance = config.problem.build()?;
    let theta = evaluation_point(&config, &instance, result)?;
    let options = config.uncertainty.unwrap_or_default();
    let file = uncertainty_file(
        &instance,
        &theta,
        fd_step_of(&config.optimizer),
        lambda_reg_of(&config.optimizer),
        &options,
    )?;
    write_json(&config.output_dir, "uncertainty.json", &file)?;
    for row in &file.parameters {
        println!(
            "{:<12} {:>14.6e} ± {:<12.4e} {:?}",
            row.name, row.optimized, row.delta_theta, row.class
        );
    }
    Ok(())
}

pub fn generate_data(config_path: &Path, overrides: &Overrides) -> Result<(), Failure> {
    let mut config = RunConfig::load(config_path)?;
    config.apply(overrides)?;
    if let Some(seed) = overrides.seed {
        use sloppyopt::bench::ProblemSpec;
        match &mut config.problem {
            ProblemSpec::SumOfExponentials(s) => s.data_seed = seed,
            ProblemSpec::ToyKinetics(s) => s.data_seed = seed,
            ProblemSpec::Quadratic(_) => {}
        }
    }
    let instance = config.problem.build()?;
    let dataset = instance.dataset.as_ref().ok_or_else(|| {
        Failure::config(format!(
            "problem '{}' has no observations to generate",
            instance.id
        ))
    })?;
    std::fs::create_dir_all(&config.output_dir).map_err(|e| {
        Failure::config(format!(
            "cannot create output directory {}: {e}",
            config.output_dir.display()
        ))
    })?;
    let path = config.output_dir.join("dataset.csv");
    dataset.save(&path)?;
    println!("{} conditions written to {}", dataset.len(), path.display());
    Ok(())
}
