//! End-to-end acceptance checks. Each test writes one `PASS`/`FAIL` line to
//! stderr (bypassing output capture) before asserting.

use std::io::Write;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sloppyopt::baselines::DEConfig;
use sloppyopt::bench::{
    run_benchmark, BenchmarkPlan, ExponentialsSpec, KineticsSpec, OptimizerSpec, ProblemSpec,
    QuadraticSpec, SplitSpec, StartSpec,
};
use sloppyopt::hessian::{
    directional_diffs, draw_sketch, draw_sketch_with, fd_jacobian, reduced_hessian,
};
use sloppyopt::hierarchical::{build_geometry, gradient_diagnostics, run, HierarchicalConfig};
use sloppyopt::models::{decades_spanned, PrescribedSpectrumQuadratic};
use sloppyopt::solvers::InnerSolverOptions;
use sloppyopt::subspace::eigendecompose;
use sloppyopt::types::{Evaluator, Phase, ResidualProblem};
use sloppyopt::uncertainty::{parameter_uncertainty, UncertaintyOptions};

fn report(id: u32, name: &str, pass: bool, start: Instant, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "[{verdict}] criterion {id:>2} {name} ({:.1}s): {detail}",
        start.elapsed().as_secs_f64()
    );
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len();
    if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}

#[test]
fn criterion_01_monotone_descent() {
    let start = Instant::now();
    let problems = [
        (
            ProblemSpec::Quadratic(QuadraticSpec {
                n: 10,
                decades: 3.0,
                seed: 1,
            }),
            2000,
        ),
        (
            ProblemSpec::SumOfExponentials(ExponentialsSpec {
                n: 12,
                ..ExponentialsSpec::default()
            }),
            2000,
        ),
        (
            ProblemSpec::ToyKinetics(KineticsSpec {
                pressures: 5,
                temperatures: 5,
                ..KineticsSpec::default()
            }),
            800,
        ),
    ];
    let mut violations = Vec::new();
    let mut runs = 0;
    for (spec, budget) in &problems {
        let inst = spec.build().unwrap();
        let theta0 = StartSpec::default().resolve(&inst).unwrap();
        let configs = [
            HierarchicalConfig::exact(),
            HierarchicalConfig::stochastic(4),
        ];
        for cfg in configs {
            for seed in 0..3 {
                let cfg = cfg.clone().with_seed(seed).with_budget(Some(*budget));
                let r = run(&inst.problem(), &theta0, &cfg).unwrap();
                runs += 1;
                if !r.loss_history.windows(2).all(|w| w[1] <= w[0]) {
                    violations.push(format!("{} {:?} seed {seed}", inst.id, cfg.strategy));
                }
            }
        }
    }
    let pass = violations.is_empty();
    report(
        1,
        "monotone descent",
        pass,
        start,
        &format!("{runs} runs, violations: {violations:?}"),
    );
    assert!(pass);
}

#[test]
fn criterion_02_sloppy_spectrum() {
    let start = Instant::now();
    let inst = ProblemSpec::SumOfExponentials(ExponentialsSpec {
        n: 8,
        samples: 40,
        ..ExponentialsSpec::default()
    })
    .build()
    .unwrap();
    let problem = inst.problem();
    let mut ev = Evaluator::new(&problem).with_reflection(false);
    let (j, _) = fd_jacobian(&mut ev, &inst.reference, 1e-6, None, Phase::Geometry).unwrap();
    let spectrum = eigendecompose(&j.tr_mul(&j)).unwrap();
    let decades = decades_spanned(&spectrum.eigenvalues);
    let pass = decades >= 6.0;
    report(
        2,
        "sloppy spectrum",
        pass,
        start,
        &format!("{decades:.2} decades (need >= 6)"),
    );
    assert!(pass);
}

#[test]
fn criterion_03_geometry_call_counts() {
    let start = Instant::now();
    let inst = ProblemSpec::SumOfExponentials(ExponentialsSpec {
        n: 12,
        ..ExponentialsSpec::default()
    })
    .build()
    .unwrap();
    let theta = StartSpec::default().resolve(&inst).unwrap();
    let p = inst.problem();
    build_geometry(&p, &theta, &HierarchicalConfig::exact()).unwrap();
    let exact = p.calls();
    let p = inst.problem();
    build_geometry(&p, &theta, &HierarchicalConfig::stochastic(5)).unwrap();
    let stochastic = p.calls();
    let pass = exact == 13 && stochastic == 6;
    report(
        3,
        "geometry call counts",
        pass,
        start,
        &format!("exact {exact} (n+1 = 13), stochastic {stochastic} (k+1 = 6)"),
    );
    assert!(pass);
}

#[test]
fn criterion_04_reduced_hessian_fidelity() {
    let start = Instant::now();
    // (a) identity sketch on a linear model recovers the exact spectrum
    let q = PrescribedSpectrumQuadratic::new(6, 4.0, 3).unwrap();
    let expected = eigendecompose(&q.hessian()).unwrap().eigenvalues;
    let theta = vec![0.3; 6];
    let p = ResidualProblem::new(q);
    let mut ev = Evaluator::new(&p).with_reflection(false);
    let identity = DMatrix::<f64>::identity(6, 6);
    let (y, _) =
        directional_diffs(&mut ev, &theta, &identity, 1e-6, None, Phase::Geometry).unwrap();
    let got = eigendecompose(&reduced_hessian(&y)).unwrap().eigenvalues;
    let err_a = expected
        .iter()
        .zip(&got)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let pass_a = err_a <= 1e-8;

    // (b) a fixed unit vector keeps k/n of its squared norm in a random
    // k-dimensional subspace on average
    let (n, k, draws) = (29, 18, 4000);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut u = nalgebra::DVector::<f64>::zeros(n);
    u[0] = 0.6;
    u[7] = 0.8;
    let samples: Vec<f64> = (0..draws)
        .map(|_| {
            draw_sketch_with(n, k, &mut rng)
                .unwrap()
                .omega
                .tr_mul(&u)
                .norm_squared()
        })
        .collect();
    let mean = samples.iter().sum::<f64>() / draws as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
    let se = (var / draws as f64).sqrt();
    let target = k as f64 / n as f64;
    let pass_b = (mean - target).abs() <= 3.0 * se;
    // seeded draws reproduce
    assert_eq!(
        draw_sketch(n, k, 5).unwrap().omega,
        draw_sketch(n, k, 5).unwrap().omega
    );

    let pass = pass_a && pass_b;
    report(
        4,
        "reduced-Hessian fidelity",
        pass,
        start,
        &format!(
            "(a) max eigenvalue error {err_a:.2e} (<= 1e-8); (b) E[cos^2] = {mean:.5} vs k/n = {target:.5}, 3 SE = {:.5}",
            3.0 * se
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_05_sample_efficiency() {
    let start = Instant::now();
    let problem = ProblemSpec::SumOfExponentials(ExponentialsSpec::default());
    let plan = BenchmarkPlan {
        problem: problem.clone(),
        start: StartSpec::default(),
        optimizers: vec![
            OptimizerSpec::Hierarchical(HierarchicalConfig::stochastic(5)),
            OptimizerSpec::NelderMead(InnerSolverOptions::default()),
            OptimizerSpec::Powell(InnerSolverOptions::default()),
            OptimizerSpec::DifferentialEvolution(DEConfig::default()),
        ],
        budget: 1500,
        seeds: (0..5).collect(),
        ..BenchmarkPlan::default()
    };
    let bundle = run_benchmark(&plan).unwrap();
    let medians: Vec<(String, f64)> = bundle
        .summary
        .optimizers
        .iter()
        .map(|o| {
            (
                o.optimizer.clone(),
                o.median_calls_to_threshold.unwrap_or(f64::INFINITY),
            )
        })
        .collect();
    let ours = medians[0].1;
    let beats_all = medians[1..].iter().all(|(_, m)| ours < *m);

    // outer iterations needed to reach the threshold for k = 3 and 5
    let inst = problem.build().unwrap();
    let theta0 = &bundle.summary.theta0;
    let mut worst_iteration = 0;
    let mut reached = true;
    for k in [3, 5] {
        for seed in 0..5 {
            let cfg = HierarchicalConfig::stochastic(k)
                .with_seed(seed)
                .with_budget(Some(1500));
            let r = run(&inst.problem(), theta0, &cfg).unwrap();
            match r.trace.calls_to_threshold(bundle.summary.threshold) {
                Some(c) => {
                    let it = r
                        .trace
                        .iterations
                        .iter()
                        .position(|d| d.calls >= c)
                        .map_or(usize::MAX, |i| i + 1);
                    worst_iteration = worst_iteration.max(it);
                }
                None => reached = false,
            }
        }
    }
    let fast = reached && worst_iteration <= 25;
    let pass = beats_all && fast;
    let table: Vec<String> = medians.iter().map(|(n, m)| format!("{n} {m}")).collect();
    report(
        5,
        "sample efficiency",
        pass,
        start,
        &format!(
            "median calls to 0.1*phi0: [{}]; k in {{3,5}} worst outer iteration to threshold {worst_iteration} (<= 25)",
            table.join(", ")
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_06_convergence_diagnostics() {
    let start = Instant::now();
    let q = PrescribedSpectrumQuadratic::new(10, 1.0, 7).unwrap();
    let p = ResidualProblem::new(q);
    let cfg = HierarchicalConfig::exact();
    let r = run(&p, &[0.2; 10], &cfg).unwrap();
    let delta = r
        .misalignment_history
        .last()
        .copied()
        .unwrap_or(f64::INFINITY);
    let d = gradient_diagnostics(&p, &r, &cfg).unwrap();
    let pass =
        r.converged && delta < 1e-4 && d.stiff_fraction < 0.1 && d.grad_norm <= 1.1 * d.bound_rhs;
    report(
        6,
        "convergence diagnostics",
        pass,
        start,
        &format!(
            "converged {}, delta_s {delta:.2e}, stiff fraction {:.3e}, |g| {:.3e} <= 1.1 * {:.3e}",
            r.converged, d.stiff_fraction, d.grad_norm, d.bound_rhs
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_07_uncertainty_arithmetic() {
    let start = Instant::now();
    let h = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 100.0]));
    let r = parameter_uncertainty(&h, 1.0, &UncertaintyOptions::default()).unwrap();
    let e0 = (r.delta_theta[0] - 0.02f64.sqrt()).abs();
    let e1 = (r.delta_theta[1] - 0.0002f64.sqrt()).abs();
    let pass = e0 <= 1e-12 && e1 <= 1e-12;
    report(
        7,
        "uncertainty arithmetic",
        pass,
        start,
        &format!(
            "delta_theta = ({:.6}, {:.6}), errors ({e0:.1e}, {e1:.1e})",
            r.delta_theta[0], r.delta_theta[1]
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_08_fd_correctness() {
    let start = Instant::now();
    let q = PrescribedSpectrumQuadratic::new(10, 3.0, 2).unwrap();
    let analytic = q.matrix().clone();
    let p = ResidualProblem::new(q);
    let mut details = Vec::new();
    let mut pass = true;
    for h in [1e-4, 1e-6] {
        let mut ev = Evaluator::new(&p).with_reflection(false);
        let (j, _) = fd_jacobian(&mut ev, &[0.35; 10], h, None, Phase::Geometry).unwrap();
        let err = (&j - &analytic).amax();
        pass &= err <= 10.0 * h;
        details.push(format!("h = {h:e}: max error {err:.2e}"));
    }
    report(
        8,
        "finite-difference Jacobian",
        pass,
        start,
        &details.join("; "),
    );
    assert!(pass);
}

#[test]
fn criterion_09_determinism() {
    let start = Instant::now();
    let plan = BenchmarkPlan {
        problem: ProblemSpec::SumOfExponentials(ExponentialsSpec {
            n: 10,
            samples: 30,
            ..ExponentialsSpec::default()
        }),
        optimizers: vec![
            OptimizerSpec::Hierarchical(HierarchicalConfig::exact()),
            OptimizerSpec::Hierarchical(HierarchicalConfig::stochastic(4)),
            OptimizerSpec::DifferentialEvolution(DEConfig::default()),
        ],
        budget: 600,
        seeds: vec![0, 1],
        split: Some(SplitSpec::default()),
        ..BenchmarkPlan::default()
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        run_benchmark(&plan).unwrap().write(d.path()).unwrap();
    }
    let mut names: Vec<_> = std::fs::read_dir(dirs[0].path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    let differing: Vec<_> = names
        .iter()
        .filter(|n| {
            std::fs::read(dirs[0].path().join(n)).unwrap()
                != std::fs::read(dirs[1].path().join(n))
                    .ok()
                    .unwrap_or_default()
        })
        .collect();
    let pass = names.len() == 13 && differing.is_empty();
    report(
        9,
        "determinism",
        pass,
        start,
        &format!("{} files compared, {} differ", names.len(), differing.len()),
    );
    assert!(pass);
}

#[test]
fn criterion_10_generalization() {
    let start = Instant::now();
    let plan = BenchmarkPlan {
        problem: ProblemSpec::ToyKinetics(KineticsSpec {
            noise: 0.05,
            data_seed: 3,
            ..KineticsSpec::default()
        }),
        // saturating rate laws need bounded outer steps to avoid flat plateaus
        optimizers: vec![
            OptimizerSpec::Hierarchical(HierarchicalConfig {
                trust_radius: Some(0.5),
                ..HierarchicalConfig::exact()
            }),
            OptimizerSpec::Hierarchical(HierarchicalConfig {
                trust_radius: Some(0.5),
                ..HierarchicalConfig::stochastic(4)
            }),
        ],
        budget: 3000,
        seeds: (0..3).collect(),
        split: Some(SplitSpec::default()),
        ..BenchmarkPlan::default()
    };
    let bundle = run_benchmark(&plan).unwrap();
    let n_train = bundle.summary.train_size.unwrap() as f64;
    let n_test = bundle.summary.test_size.unwrap() as f64;
    let converged: Vec<_> = bundle.runs.iter().filter(|r| r.converged).collect();
    let ratios: Vec<f64> = converged
        .iter()
        .map(|r| {
            let train = r.best_train_loss().unwrap() / n_train;
            let test = r.final_test_loss().unwrap() / n_test;
            test / train
        })
        .collect();
    let pass = !ratios.is_empty() && ratios.iter().all(|q| (q - 1.0).abs() < 0.5);
    report(
        10,
        "train/test generalization",
        pass,
        start,
        &format!(
            "split {n_train}/{n_test}, {} of {} runs converged, per-point test/train loss ratios {:?}, median {:.3}",
            converged.len(),
            bundle.runs.len(),
            ratios.iter().map(|q| format!("{q:.3}")).collect::<Vec<_>>(),
            median(ratios.clone())
        ),
    );
    assert!(pass);
}
