use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::hessian::draw_sketch;
use crate::types::Simulator;

/// Linear residuals `r(θ) = A (θ − θ*)` with prescribed singular values, so
/// the Gauss-Newton Hessian `AᵀA` has a known spectrum.
#[derive(Debug, Clone)]
pub struct PrescribedSpectrumQuadratic {
    a: DMatrix<f64>,
    theta_star: Vec<f64>,
}

impl PrescribedSpectrumQuadratic {
    /// Singular values `10^(−d(i−1)/2)`, i.e. Hessian eigenvalues spaced `d`
    /// decades apart, in random orthonormal frames drawn from `seed`.
    /// `θ*` sits at the centre of the unit box.
    pub fn new(n: usize, decades: f64, seed: u64) -> Result<Self> {
        let sigmas: Vec<f64> = (0..n)
            .map(|i| 10f64.powf(-decades * i as f64 / 2.0))
            .collect();
        let u = draw_sketch(n, n, seed)?.omega;
        let v = draw_sketch(n, n, seed.wrapping_add(0x9e37_79b9))?.omega;
        let s = DMatrix::from_diagonal(&DVector::from_vec(sigmas));
        Ok(Self {
            a: u * s * v.transpose(),
            theta_star: vec![0.5; n],
        })
    }

    /// `A = diag(σ)`: eigenvectors are the coordinate axes.
    pub fn axis_aligned(singular_values: &[f64], theta_star: Vec<f64>) -> Result<Self> {
        if singular_values.len() != theta_star.len() {
            return Err(Error::DimensionMismatch {
                expected: singular_values.len(),
                got: theta_star.len(),
            });
        }
        Ok(Self {
            a: DMatrix::from_diagonal(&DVector::from_column_slice(singular_values)),
            theta_star,
        })
    }

    pub fn from_matrix(a: DMatrix<f64>, theta_star: Vec<f64>) -> Result<Self> {
        if a.ncols() != theta_star.len() {
            return Err(Error::DimensionMismatch {
                expected: a.ncols(),
                got: theta_star.len(),
            });
        }
        Ok(Self { a, theta_star })
    }

    pub fn with_theta_star(mut self, theta_star: Vec<f64>) -> Result<Self> {
        if theta_star.len() != self.theta_star.len() {
            return Err(Error::DimensionMismatch {
                expected: self.theta_star.len(),
                got: theta_star.len(),
            });
        }
        self.theta_star = theta_star;
        Ok(self)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn theta_star(&self) -> &[f64] {
        &self.theta_star
    }

    /// Exact `AᵀA`.
    pub fn hessian(&self) -> DMatrix<f64> {
        self.a.tr_mul(&self.a)
    }
}

impl Simulator for PrescribedSpectrumQuadratic {
    fn dimension(&self) -> usize {
        self.a.ncols()
    }

    fn residual_len(&self) -> usize {
        self.a.nrows()
    }

    fn residuals(&self, theta: &[f64]) -> Result<DVector<f64>> {
        if theta.len() != self.dimension() {
            return Err(Error::DimensionMismatch {
                expected: self.dimension(),
                got: theta.len(),
            });
        }
        let d = DVector::from_iterator(
            theta.len(),
            theta.iter().zip(&self.theta_star).map(|(t, s)| t - s),
        );
        Ok(&self.a * d)
    }
}
