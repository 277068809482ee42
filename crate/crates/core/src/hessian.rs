//! Forward-difference Jacobians, the Gauss-Newton Hessian, and the implicit
//! reduced Hessian built from residual probes along a random sketch.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::types::{Evaluation, Evaluator, Phase};

pub const DEFAULT_FD_STEP: f64 = 1e-6;
pub const DEFAULT_LAMBDA_REG: f64 = 1e-6;

/// A column-orthonormal `n × k` random basis.
#[derive(Debug, Clone)]
pub struct SketchBasis {
    pub omega: DMatrix<f64>,
    pub seed: Option<u64>,
}

impl SketchBasis {
    pub fn rank(&self) -> usize {
        self.omega.ncols()
    }
}

#[derive(Debug, Clone)]
pub struct CurvatureEstimate {
    /// Approximates `J Ω`.
    pub y: DMatrix<f64>,
    /// `YᵀY`.
    pub h_small: DMatrix<f64>,
    pub base: Evaluation,
}

/// Forward-difference Jacobian of the residuals at `theta`.
///
/// Spends `n + 1` simulator calls, or `n` when `base` already holds the
/// residuals at `theta`. Returns the Jacobian and the base evaluation.
pub fn fd_jacobian(
    evaluator: &mut Evaluator<'_>,
    theta: &[f64],
    h: f64,
    base: Option<Evaluation>,
    phase: Phase,
) -> Result<(DMatrix<f64>, Evaluation)> {
    let n = theta.len();
    let directions: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            e
        })
        .collect();
    probe(evaluator, theta, &directions, h, base, phase)
}

/// `(r(θ + h·b_i) − r(θ)) / h` for each unit-norm column `b_i` of `basis`.
///
/// Spends `p + 1` simulator calls (`p` when `base` is supplied).
pub fn directional_diffs(
    evaluator: &mut Evaluator<'_>,
    theta: &[f64],
    basis: &DMatrix<f64>,
    h: f64,
    base: Option<Evaluation>,
    phase: Phase,
) -> Result<(DMatrix<f64>, Evaluation)> {
    if basis.nrows() != theta.len() {
        return Err(Error::DimensionMismatch {
            expected: theta.len(),
            got: basis.nrows(),
        });
    }
    for (i, col) in basis.column_iter().enumerate() {
        let norm = col.norm();
        if (norm - 1.0).abs() > 1e-8 {
            return Err(Error::InvalidArgument(format!(
                "basis column {i} has norm {norm}, expected 1"
            )));
        }
    }
    let directions: Vec<Vec<f64>> = basis
        .column_iter()
        .map(|c| c.iter().copied().collect())
        .collect();
    probe(evaluator, theta, &directions, h, base, phase)
}

fn probe(
    evaluator: &mut Evaluator<'_>,
    theta: &[f64],
    directions: &[Vec<f64>],
    h: f64,
    base: Option<Evaluation>,
    phase: Phase,
) -> Result<(DMatrix<f64>, Evaluation)> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "fd step must be positive, got {h}"
        )));
    }
    if theta.len() != evaluator.dimension() {
        return Err(Error::DimensionMismatch {
            expected: evaluator.dimension(),
            got: theta.len(),
        });
    }
    let base = match base {
        Some(b) => b,
        None => evaluator.evaluate(theta, phase),
    };
    if base.failed {
        return Err(Error::Simulation(
            "base point evaluation failed; cannot difference".into(),
        ));
    }
    let points: Vec<Vec<f64>> = directions
        .iter()
        .map(|d| theta.iter().zip(d).map(|(t, di)| t + h * di).collect())
        .collect();
    let probes = evaluator.evaluate_batch(&points, phase);

    let m = base.residual.len();
    let mut out = DMatrix::zeros(m, directions.len());
    let mut failed = 0;
    for (j, p) in probes.iter().enumerate() {
        if p.failed {
            failed += 1;
            continue;
        }
        for i in 0..m {
            out[(i, j)] = (p.residual[i] - base.residual[i]) / h;
        }
    }
    if failed > 0 {
        if evaluator.exhausted() {
            log::debug!("budget ran out while differencing; {failed} column(s) left at zero");
        } else {
            log::warn!("{failed} finite-difference probe(s) failed; columns left at zero");
        }
    }
    Ok((out, base))
}

/// `JᵀJ + λ I`, exactly symmetric.
pub fn gauss_newton_hessian(jacobian: &DMatrix<f64>, lambda_reg: f64) -> DMatrix<f64> {
    let mut h = jacobian.tr_mul(jacobian);
    symmetrize(&mut h);
    for i in 0..h.nrows() {
        h[(i, i)] += lambda_reg;
    }
    h
}

/// `YᵀY` for the probe matrix `Y ≈ JΩ`.
pub fn reduced_hessian(y: &DMatrix<f64>) -> DMatrix<f64> {
    let mut h = y.tr_mul(y);
    symmetrize(&mut h);
    h
}

fn symmetrize(h: &mut DMatrix<f64>) {
    let n = h.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (h[(i, j)] + h[(j, i)]);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
}

pub fn draw_sketch(n: usize, k: usize, seed: u64) -> Result<SketchBasis> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = draw_sketch_with(n, k, &mut rng)?;
    s.seed = Some(seed);
    Ok(s)
}

/// Gaussian `n × k` matrix orthonormalized by QR, with column signs fixed so
/// `R` has a non-negative diagonal.
pub fn draw_sketch_with<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<SketchBasis> {
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "sketch rank must satisfy 1 <= k <= n (k = {k}, n = {n})"
        )));
    }
    let g = DMatrix::<f64>::from_fn(n, k, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..k {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(SketchBasis {
        omega: q,
        seed: None,
    })
}

/// Probes the residuals along the sketch and forms `H_small = (JΩ)ᵀ(JΩ)`.
pub fn curvature_estimate(
    evaluator: &mut Evaluator<'_>,
    theta: &[f64],
    sketch: &SketchBasis,
    h: f64,
    base: Option<Evaluation>,
    phase: Phase,
) -> Result<CurvatureEstimate> {
    let (y, base) = directional_diffs(evaluator, theta, &sketch.omega, h, base, phase)?;
    let h_small = reduced_hessian(&y);
    Ok(CurvatureEstimate { y, h_small, base })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{ResidualProblem, Simulator};
    use nalgebra::DVector;

    struct Linear {
        a: DMatrix<f64>,
        b: DVector<f64>,
    }
    impl Simulator for Linear {
        fn dimension(&self) -> usize {
            self.a.ncols()
        }
        fn residual_len(&self) -> usize {
            self.a.nrows()
        }
        fn residuals(&self, theta: &[f64]) -> Result<DVector<f64>> {
            Ok(&self.a * DVector::from_column_slice(theta) - &self.b)
        }
    }

    struct Constant;
    impl Simulator for Constant {
        fn dimension(&self) -> usize {
            3
        }
        fn residual_len(&self) -> usize {
            2
        }
        fn residuals(&self, _: &[f64]) -> Result<DVector<f64>> {
            Ok(DVector::from_vec(vec![1.0, -2.0]))
        }
    }

    struct Squares;
    impl Simulator for Squares {
        fn dimension(&self) -> usize {
            3
        }
        fn residual_len(&self) -> usize {
            3
        }
        fn residuals(&self, theta: &[f64]) -> Result<DVector<f64>> {
            Ok(DVector::from_iterator(3, theta.iter().map(|t| t * t)))
        }
    }

    fn linear() -> Linear {
        Linear {
            a: DMatrix::from_row_slice(
                4,
                3,
                &[1.0, 2.0, 0.0, -1.0, 0.5, 3.0, 0.0, 1.0, 1.0, 2.0, 0.0, -0.5],
            ),
            b: DVector::from_vec(vec![0.1, 0.2, -0.3, 0.4]),
        }
    }

    #[test]
    fn jacobian_of_linear_model_is_exact() {
        let lin = linear();
        let a = lin.a.clone();
        let p = ResidualProblem::new(lin);
        for h in [1e-4, 1e-5, 1e-6] {
            let mut ev = Evaluator::new(&p).with_reflection(false);
            let (j, _) = fd_jacobian(&mut ev, &[0.3, 0.2, 0.7], h, None, Phase::Geometry).unwrap();
            assert!((j - &a).amax() < 1e-8, "h = {h}");
            assert_eq!(ev.calls(), 4);
        }
    }

    #[test]
    fn jacobian_of_constant_model_is_zero() {
        let p = ResidualProblem::new(Constant);
        let mut ev = Evaluator::new(&p);
        let (j, _) = fd_jacobian(&mut ev, &[0.1, 0.2, 0.3], 1e-6, None, Phase::Geometry).unwrap();
        assert_eq!(j.amax(), 0.0);
    }

    #[test]
    fn forward_difference_bias_on_squares() {
        let p = ResidualProblem::new(Squares);
        let mut ev = Evaluator::new(&p);
        let h = 1e-6;
        let (j, _) = fd_jacobian(&mut ev, &[0.0; 3], h, None, Phase::Geometry).unwrap();
        for i in 0..3 {
            assert!((j[(i, i)] - h).abs() < 1e-15);
        }
    }

    #[test]
    fn directional_diffs_match_jacobian_product() {
        let lin = linear();
        let a = lin.a.clone();
        let p = ResidualProblem::new(lin);
        let sketch = draw_sketch(3, 2, 7).unwrap();
        let mut ev = Evaluator::new(&p).with_reflection(false);
        let (y, _) = directional_diffs(
            &mut ev,
            &[0.3, 0.2, 0.7],
            &sketch.omega,
            1e-6,
            None,
            Phase::Geometry,
        )
        .unwrap();
        assert!((y - &a * &sketch.omega).amax() < 1e-8);
        assert_eq!(ev.calls(), 3);
    }

    #[test]
    fn identity_basis_reproduces_jacobian_bitwise() {
        let p = ResidualProblem::new(linear());
        let theta = [0.3, 0.2, 0.7];
        let mut ev = Evaluator::new(&p);
        let (j, base) = fd_jacobian(&mut ev, &theta, 1e-6, None, Phase::Geometry).unwrap();
        let (y, _) = directional_diffs(
            &mut ev,
            &theta,
            &DMatrix::identity(3, 3),
            1e-6,
            Some(base),
            Phase::Geometry,
        )
        .unwrap();
        assert_eq!(j, y);
    }

    #[test]
    fn null_direction_gives_zero_column() {
        // column 3 of A is null: A e_3 = 0
        let lin = Linear {
            a: DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
            b: DVector::zeros(2),
        };
        let p = ResidualProblem::new(lin);
        let mut ev = Evaluator::new(&p);
        let basis = DMatrix::from_column_slice(3, 1, &[0.0, 0.0, 1.0]);
        let (y, _) = directional_diffs(
            &mut ev,
            &[0.2, 0.2, 0.2],
            &basis,
            1e-6,
            None,
            Phase::Geometry,
        )
        .unwrap();
        assert_eq!(y.amax(), 0.0);
    }

    #[test]
    fn non_unit_basis_rejected() {
        let p = ResidualProblem::new(linear());
        let mut ev = Evaluator::new(&p);
        let basis = DMatrix::from_column_slice(3, 1, &[2.0, 0.0, 0.0]);
        assert!(
            directional_diffs(&mut ev, &[0.1; 3], &basis, 1e-6, None, Phase::Geometry).is_err()
        );
    }

    #[test]
    fn gauss_newton_examples() {
        let h = gauss_newton_hessian(&DMatrix::identity(2, 2), 0.0);
        assert_eq!(h, DMatrix::identity(2, 2));
        let j = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let h = gauss_newton_hessian(&j, 1e-6);
        assert_eq!(
            h,
            DMatrix::from_row_slice(2, 2, &[1.0 + 1e-6, 0.0, 0.0, 1e-6])
        );
    }

    #[test]
    fn reduced_hessian_of_orthogonal_columns() {
        let y = DMatrix::from_column_slice(3, 2, &[2.0, 0.0, 0.0, 0.0, 0.0, 3.0]);
        let h = reduced_hessian(&y);
        assert_eq!(h, DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 9.0]));
    }

    #[test]
    fn sketch_properties() {
        let s = draw_sketch(5, 5, 1).unwrap();
        assert!((s.omega.tr_mul(&s.omega) - DMatrix::identity(5, 5)).amax() < 1e-10);
        let s = draw_sketch(2, 1, 3).unwrap();
        assert!((s.omega.column(0).norm() - 1.0).abs() < 1e-12);
        assert!(draw_sketch(3, 4, 0).is_err());
        assert!(draw_sketch(3, 0, 0).is_err());
        let a = draw_sketch(10, 3, 99).unwrap();
        let b = draw_sketch(10, 3, 99).unwrap();
        assert_eq!(a.omega, b.omega);
    }

    #[test]
    fn identity_sketch_recovers_gauss_newton() {
        let lin = linear();
        let a = lin.a.clone();
        let p = ResidualProblem::new(lin);
        let mut ev = Evaluator::new(&p);
        let sketch = SketchBasis {
            omega: DMatrix::identity(3, 3),
            seed: None,
        };
        let est = curvature_estimate(
            &mut ev,
            &[0.4, 0.4, 0.4],
            &sketch,
            1e-6,
            None,
            Phase::Geometry,
        )
        .unwrap();
        let exact = gauss_newton_hessian(&a, 0.0);
        assert!((est.h_small - exact).amax() < 1e-8);
    }
}
