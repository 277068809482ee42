use nalgebra::DMatrix;

use super::{InnerSolverOptions, SolveResult, Tracked};

const REFLECT: f64 = 1.0;
const EXPAND: f64 = 2.0;
const CONTRACT: f64 = 0.5;
const SHRINK: f64 = 0.5;
const DEGENERACY_RATIO: f64 = 1e-10;

/// Nelder–Mead simplex search with the standard reflect/expand/contract/shrink
/// rules.
///
/// The initial simplex is `x0` plus `initial_step` along each axis. Stops when
/// the vertex values agree to `f_tol` (relative) or the simplex fits inside
/// an `x_tol` box. A simplex that collapses onto a lower-dimensional set is
/// rebuilt around its best vertex once; a second collapse ends the search
/// with the budget flag.
pub fn nelder_mead<F>(f: F, x0: &[f64], opts: &InnerSolverOptions) -> SolveResult
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    let mut obj = Tracked::new(f, opts.max_evals, x0);
    let Some(f0) = obj.call(x0) else {
        return obj.finish(0, false);
    };
    if n == 0 {
        return obj.finish(0, true);
    }

    let Some(mut simplex) = build_simplex(&mut obj, x0, f0, opts.initial_step) else {
        return obj.finish(0, false);
    };
    let mut restarted = false;
    let mut iterations = 0;

    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let f_best = simplex[0].1;
        let f_worst = simplex[n].1;

        let f_spread = f_worst - f_best;
        let x_spread = simplex[1..]
            .iter()
            .flat_map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
            .fold(0.0f64, f64::max);
        if f_spread <= opts.f_tol * f_best.abs() + f64::MIN_POSITIVE || x_spread <= opts.x_tol {
            return obj.finish(iterations, true);
        }

        if iterations > 0 && iterations % (2 * n + 2) == 0 && is_degenerate(&simplex) {
            if restarted {
                log::debug!("simplex collapsed twice; giving up");
                return obj.finish(iterations, false);
            }
            restarted = true;
            let (best_x, best_f) = simplex[0].clone();
            match build_simplex(&mut obj, &best_x, best_f, opts.initial_step) {
                Some(s) => simplex = s,
                None => return obj.finish(iterations, false),
            }
            continue;
        }
        iterations += 1;

        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|(x, _)| x[j]).sum::<f64>() / n as f64)
            .collect();
        let toward = |t: f64, from: &[f64]| -> Vec<f64> {
            centroid
                .iter()
                .zip(from)
                .map(|(c, p)| c + t * (p - c))
                .collect()
        };

        let worst = simplex[n].0.clone();
        let xr = toward(-REFLECT, &worst);
        let Some(fr) = obj.call(&xr) else {
            return obj.finish(iterations, false);
        };

        if fr < f_best {
            let xe = toward(-REFLECT * EXPAND, &worst);
            let Some(fe) = obj.call(&xe) else {
                return obj.finish(iterations, false);
            };
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            continue;
        }

        let (xc, accept_if): (Vec<f64>, f64) = if fr < f_worst {
            (toward(-REFLECT * CONTRACT, &worst), fr)
        } else {
            (toward(CONTRACT, &worst), f_worst)
        };
        let Some(fc) = obj.call(&xc) else {
            return obj.finish(iterations, false);
        };
        if fc <= accept_if && fc < f_worst {
            simplex[n] = (xc, fc);
            continue;
        }

        let best = simplex[0].0.clone();
        for vertex in simplex.iter_mut().skip(1) {
            let xs: Vec<f64> = best
                .iter()
                .zip(&vertex.0)
                .map(|(b, v)| b + SHRINK * (v - b))
                .collect();
            let Some(fs) = obj.call(&xs) else {
                return obj.finish(iterations, false);
            };
            *vertex = (xs, fs);
        }
    }
}

fn build_simplex<F: FnMut(&[f64]) -> f64>(
    obj: &mut Tracked<F>,
    x0: &[f64],
    f0: f64,
    step: f64,
) -> Option<Vec<(Vec<f64>, f64)>> {
    let mut simplex = vec![(x0.to_vec(), f0)];
    for i in 0..x0.len() {
        let mut x = x0.to_vec();
        x[i] += step;
        let fx = obj.call(&x)?;
        simplex.push((x, fx));
    }
    Some(simplex)
}

fn is_degenerate(simplex: &[(Vec<f64>, f64)]) -> bool {
    let n = simplex[0].0.len();
    let base = &simplex[0].0;
    let edges = DMatrix::from_fn(n, n, |i, j| simplex[j + 1].0[i] - base[i]);
    let sv = edges.singular_values();
    let max = sv.max();
    let min = sv.min();
    max > 0.0 && min / max < DEGENERACY_RATIO
}
