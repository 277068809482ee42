use super::{InnerSolverOptions, SolveResult, Tracked};

const GOLDEN: f64 = 1.618_033_988_749_895;
const CGOLD: f64 = 0.381_966_011_250_105;
const GROW_LIMIT: f64 = 100.0;
const TINY: f64 = 1e-21;

/// Powell's conjugate-direction method.
///
/// Each sweep line-minimizes along every direction in the set, then replaces
/// the direction of largest decrease with the net displacement when the
/// extrapolation test says the new direction is worth keeping. Line searches
/// bracket the minimum by golden expansion and refine it with Brent's
/// parabolic/golden-section method.
///
/// The returned point is the best one evaluated, so `f(x*) <= f(x0)`.
pub fn powell<F>(f: F, x0: &[f64], opts: &InnerSolverOptions) -> SolveResult
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    let mut obj = Tracked::new(f, opts.max_evals, x0);
    let Some(mut fx) = obj.call(x0) else {
        return obj.finish(0, false);
    };
    if n == 0 {
        return obj.finish(0, true);
    }

    let mut directions: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut d = vec![0.0; n];
            d[i] = 1.0;
            d
        })
        .collect();
    let mut x = x0.to_vec();
    let mut iterations = 0;

    loop {
        iterations += 1;
        let f_start = fx;
        let x_start = x.clone();
        let mut biggest_drop = 0.0;
        let mut biggest_index = 0;

        for (i, dir) in directions.iter().enumerate() {
            let f_prev = fx;
            match line_minimize(&mut obj, &x, fx, dir, opts) {
                Some((xn, fnew)) => {
                    x = xn;
                    fx = fnew;
                }
                None => return obj.finish(iterations, false),
            }
            if f_prev - fx > biggest_drop {
                biggest_drop = f_prev - fx;
                biggest_index = i;
            }
        }

        if 2.0 * (f_start - fx) <= opts.f_tol * (f_start.abs() + fx.abs()) + TINY {
            return obj.finish(iterations, true);
        }

        let shift: Vec<f64> = x.iter().zip(&x_start).map(|(a, b)| a - b).collect();
        let shift_norm = shift.iter().map(|v| v * v).sum::<f64>().sqrt();
        if shift_norm <= opts.x_tol {
            return obj.finish(iterations, true);
        }

        let extrapolated: Vec<f64> = x.iter().zip(&shift).map(|(a, d)| a + d).collect();
        let Some(f_ext) = obj.call(&extrapolated) else {
            return obj.finish(iterations, false);
        };
        if f_ext < f_start {
            let t = 2.0 * (f_start - 2.0 * fx + f_ext) * (f_start - fx - biggest_drop).powi(2)
                - biggest_drop * (f_start - f_ext).powi(2);
            if t < 0.0 {
                let unit: Vec<f64> = shift.iter().map(|v| v / shift_norm).collect();
                match line_minimize(&mut obj, &x, fx, &unit, opts) {
                    Some((xn, fnew)) => {
                        x = xn;
                        fx = fnew;
                    }
                    None => return obj.finish(iterations, false),
                }
                directions[biggest_index] = directions[n - 1].clone();
                directions[n - 1] = unit;
            }
        }
    }
}

/// Minimizes `f(x + α d)` over `α`, starting from `α = 0` where the value is
/// `fx`. `None` when the evaluation budget runs out.
fn line_minimize<F: FnMut(&[f64]) -> f64>(
    obj: &mut Tracked<F>,
    x: &[f64],
    fx: f64,
    d: &[f64],
    opts: &InnerSolverOptions,
) -> Option<(Vec<f64>, f64)> {
    let mut point = vec![0.0; x.len()];
    let mut g = |alpha: f64, obj: &mut Tracked<F>| -> Option<f64> {
        for ((p, xi), di) in point.iter_mut().zip(x).zip(d) {
            *p = xi + alpha * di;
        }
        obj.call(&point)
    };

    let (a, b, c, fb) = bracket(&mut g, obj, fx, opts.initial_step)?;
    let (alpha, f_alpha) = brent(&mut g, obj, a, b, c, fb, opts.x_tol)?;
    if f_alpha < fx {
        Some((
            x.iter().zip(d).map(|(xi, di)| xi + alpha * di).collect(),
            f_alpha,
        ))
    } else {
        Some((x.to_vec(), fx))
    }
}

type LineFn<'a, F> = dyn FnMut(f64, &mut Tracked<F>) -> Option<f64> + 'a;

/// Golden-ratio expansion with parabolic extrapolation. Returns `(a, b, c, f(b))`
/// with `b` between `a` and `c` and `f(b)` no larger than the values at the
/// ends when a bracket was found.
fn bracket<F: FnMut(&[f64]) -> f64>(
    g: &mut LineFn<'_, F>,
    obj: &mut Tracked<F>,
    f0: f64,
    step: f64,
) -> Option<(f64, f64, f64, f64)> {
    let (mut a, mut fa) = (0.0, f0);
    let mut b = step;
    let mut fb = g(b, obj)?;
    if fb > fa {
        std::mem::swap(&mut a, &mut b);
        std::mem::swap(&mut fa, &mut fb);
    }
    let mut c = b + GOLDEN * (b - a);
    let mut fc = g(c, obj)?;
    let mut guard = 0;
    while fb > fc && guard < 60 {
        guard += 1;
        let r = (b - a) * (fb - fc);
        let q = (b - c) * (fb - fa);
        let denom = 2.0 * (q - r).abs().max(TINY).copysign(q - r);
        let mut u = b - ((b - c) * q - (b - a) * r) / denom;
        let ulim = b + GROW_LIMIT * (c - b);
        let fu;
        if (b - u) * (u - c) > 0.0 {
            let fu1 = g(u, obj)?;
            if fu1 < fc {
                return Some(ordered(b, u, c, fu1));
            } else if fu1 > fb {
                return Some(ordered(a, b, u, fb));
            }
            u = c + GOLDEN * (c - b);
            fu = g(u, obj)?;
        } else if (c - u) * (u - ulim) > 0.0 {
            let fu1 = g(u, obj)?;
            if fu1 < fc {
                b = c;
                c = u;
                u = c + GOLDEN * (c - b);
                fb = fc;
                fc = fu1;
                fu = g(u, obj)?;
            } else {
                fu = fu1;
            }
        } else if (u - ulim) * (ulim - c) >= 0.0 {
            u = ulim;
            fu = g(u, obj)?;
        } else {
            u = c + GOLDEN * (c - b);
            fu = g(u, obj)?;
        }
        a = b;
        b = c;
        c = u;
        fa = fb;
        fb = fc;
        fc = fu;
    }
    let _ = fa;
    Some(ordered(a, b, c, fb))
}

fn ordered(a: f64, b: f64, c: f64, fb: f64) -> (f64, f64, f64, f64) {
    if a <= c {
        (a, b, c, fb)
    } else {
        (c, b, a, fb)
    }
}

/// Brent's method on the bracket `[a, c]` with interior point `b`, to a
/// mixed absolute/relative tolerance `tol·(|x| + 1)`.
fn brent<F: FnMut(&[f64]) -> f64>(
    g: &mut LineFn<'_, F>,
    obj: &mut Tracked<F>,
    a: f64,
    b: f64,
    c: f64,
    fb: f64,
    tol: f64,
) -> Option<(f64, f64)> {
    let (mut lo, mut hi) = (a.min(c), a.max(c));
    let (mut x, mut w, mut v) = (b, b, b);
    let (mut fx, mut fw, mut fv) = (fb, fb, fb);
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    for _ in 0..200 {
        let xm = 0.5 * (lo + hi);
        let tol1 = tol * (x.abs() + 1.0);
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (hi - lo) {
            break;
        }
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let e_prev = e;
            e = d;
            if p.abs() >= (0.5 * q * e_prev).abs() || p <= q * (lo - x) || p >= q * (hi - x) {
                e = if x >= xm { lo - x } else { hi - x };
                d = CGOLD * e;
            } else {
                d = p / q;
                let u = x + d;
                if u - lo < tol2 || hi - u < tol2 {
                    d = tol1.copysign(xm - x);
                }
            }
        } else {
            e = if x >= xm { lo - x } else { hi - x };
            d = CGOLD * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else {
            x + tol1.copysign(d)
        };
        let fu = g(u, obj)?;
        if fu <= fx {
            if u >= x {
                lo = x;
            } else {
                hi = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                lo = u;
            } else {
                hi = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    Some((x, fx))
}
