//! Eigendecomposition, stiff/sloppy partitioning, sloppy pruning and the
//! subspace misalignment statistic.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, SymmetricEigen};

pub const DEFAULT_GAMMA: f64 = 0.90;
pub const DEFAULT_TAU: f64 = 1e-4;

/// Eigenpairs of a symmetric matrix, eigenvalues sorted descending.
#[derive(Debug, Clone)]
pub struct EigenSpectrum {
    pub eigenvalues: Vec<f64>,
    /// Columns are eigenvectors, each flipped so its largest-magnitude entry
    /// is positive.
    pub eigenvectors: DMatrix<f64>,
}

impl EigenSpectrum {
    pub fn dimension(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&self.eigenvalues));
        &self.eigenvectors * d * self.eigenvectors.transpose()
    }

    /// `log10(λ_max / λ_min)`; infinite when the smallest eigenvalue is not
    /// positive.
    pub fn decades(&self) -> f64 {
        let (Some(first), Some(last)) = (self.eigenvalues.first(), self.eigenvalues.last()) else {
            return 0.0;
        };
        if *last <= 0.0 {
            return f64::INFINITY;
        }
        (first / last).log10()
    }
}

pub fn eigendecompose(h: &DMatrix<f64>) -> Result<EigenSpectrum> {
    if !h.is_square() {
        return Err(Error::DimensionMismatch {
            expected: h.nrows(),
            got: h.ncols(),
        });
    }
    let asym = (h - h.transpose()).amax();
    if asym > 1e-10 * h.amax().max(1.0) {
        return Err(Error::NotSymmetric(asym));
    }
    let d = h.nrows();
    let eig = SymmetricEigen::new(h.clone());
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut vectors = DMatrix::zeros(d, d);
    let mut values = Vec::with_capacity(d);
    for (dst, &src) in order.iter().enumerate() {
        values.push(eig.eigenvalues[src]);
        let mut col = eig.eigenvectors.column(src).into_owned();
        let pivot = col.iter().copied().fold(
            0.0f64,
            |best, v| if v.abs() > best.abs() { v } else { best },
        );
        if pivot < 0.0 {
            col.neg_mut();
        }
        vectors.set_column(dst, &col);
    }
    Ok(EigenSpectrum {
        eigenvalues: values,
        eigenvectors: vectors,
    })
}

/// Smallest `k` whose leading eigenvalues hold a `gamma` fraction of the
/// total eigenvalue mass.
pub fn split_stiff(eigenvalues: &[f64], gamma: f64) -> Result<usize> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "gamma must lie in (0, 1], got {gamma}"
        )));
    }
    let total: f64 = eigenvalues.iter().map(|v| v.max(0.0)).sum();
    if !(total > 0.0) {
        return Err(Error::ZeroSpectrum);
    }
    let target = gamma * total;
    let mut acc = 0.0;
    for (i, v) in eigenvalues.iter().enumerate() {
        acc += v.max(0.0);
        if acc >= target {
            return Ok(i + 1);
        }
    }
    // rounding can leave acc a hair under target when gamma == 1
    Ok(eigenvalues.len())
}

/// Indices (0-based, into the descending spectrum) of the retained sloppy
/// directions: the largest sloppy eigenvalue always, then every later one at
/// or above `tau` times it. Empty when there are no sloppy directions.
pub fn prune_sloppy(eigenvalues: &[f64], k_s: usize, tau: f64) -> Result<Vec<usize>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tau must be positive, got {tau}"
        )));
    }
    if k_s >= eigenvalues.len() {
        return Ok(Vec::new());
    }
    let lead = eigenvalues[k_s];
    let threshold = tau * lead;
    let mut keep = vec![k_s];
    keep.extend(((k_s + 1)..eigenvalues.len()).filter(|&i| eigenvalues[i] >= threshold));
    Ok(keep)
}

/// `Ω U`: lifts sketch-space eigenvectors to the ambient parameter space.
pub fn lift(omega: &DMatrix<f64>, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if omega.ncols() != u.nrows() {
        return Err(Error::DimensionMismatch {
            expected: omega.ncols(),
            got: u.nrows(),
        });
    }
    Ok(omega * u)
}

/// `max_j (1 − σ_j)` over the singular values of `V_newᵀ V_prev`. When the
/// dimensions differ only the leading `min(k, k')` singular values count.
pub fn misalignment(previous: &DMatrix<f64>, current: &DMatrix<f64>) -> Result<f64> {
    if previous.ncols() == 0 || current.ncols() == 0 {
        return Err(Error::EmptyBasis);
    }
    if previous.nrows() != current.nrows() {
        return Err(Error::DimensionMismatch {
            expected: previous.nrows(),
            got: current.nrows(),
        });
    }
    let overlap = current.tr_mul(previous);
    let mut sigma: Vec<f64> = overlap.singular_values().iter().copied().collect();
    sigma.sort_by(|a, b| b.total_cmp(a));
    let k = previous.ncols().min(current.ncols());
    let worst = sigma.iter().take(k).map(|s| 1.0 - s).fold(0.0f64, f64::max);
    Ok(worst.clamp(0.0, 1.0))
}

/// Stiff and pruned-sloppy bases at one iterate, in ambient coordinates.
#[derive(Debug, Clone)]
pub struct SubspacePartition {
    pub stiff: DMatrix<f64>,
    pub sloppy: DMatrix<f64>,
    pub k_s: usize,
    /// Retained sloppy directions beyond the always-kept leading one; the
    /// sloppy basis has `k_l + 1` columns unless it is empty.
    pub k_l: usize,
    /// Eigenvalues belonging to the columns of `sloppy`.
    pub sloppy_values: Vec<f64>,
    /// Spectrum of the matrix the partition was taken from (`n × n` for the
    /// exact strategy, `k × k` for the sketched one).
    pub spectrum: EigenSpectrum,
    /// True when every eigenvalue fell below the flat-region threshold.
    pub flat: bool,
}

impl SubspacePartition {
    pub fn sloppy_dim(&self) -> usize {
        self.sloppy.ncols()
    }

    /// Partition `spectrum`; when `omega` is given the eigenvectors live in
    /// sketch coordinates and are lifted through it.
    pub fn from_spectrum(
        spectrum: EigenSpectrum,
        omega: Option<&DMatrix<f64>>,
        gamma: f64,
        tau: f64,
    ) -> Result<Self> {
        let k_s = split_stiff(&spectrum.eigenvalues, gamma)?;
        let kept = prune_sloppy(&spectrum.eigenvalues, k_s, tau)?;
        let vectors = match omega {
            Some(o) => lift(o, &spectrum.eigenvectors)?,
            None => spectrum.eigenvectors.clone(),
        };
        let stiff = vectors.columns(0, k_s).into_owned();
        let mut sloppy = DMatrix::zeros(vectors.nrows(), kept.len());
        for (dst, &src) in kept.iter().enumerate() {
            sloppy.set_column(dst, &vectors.column(src));
        }
        if kept.is_empty() {
            log::debug!("no sloppy directions (k_s = {k_s})");
        }
        Ok(Self {
            stiff,
            sloppy,
            k_s,
            k_l: kept.len().saturating_sub(1),
            sloppy_values: kept.iter().map(|&i| spectrum.eigenvalues[i]).collect(),
            spectrum,
            flat: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hessian::draw_sketch;
    use proptest::prelude::*;

    fn rotation(alpha: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[alpha.cos(), -alpha.sin(), alpha.sin(), alpha.cos()])
    }

    #[test]
    fn diagonal_spectrum() {
        let s = eigendecompose(&DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 3.0])).unwrap();
        assert_eq!(s.eigenvalues, vec![3.0, 1.0]);
        assert!(
            (s.eigenvectors.column(0).into_owned() - nalgebra::DVector::from_vec(vec![0.0, 1.0]))
                .amax()
                < 1e-12
        );
    }

    #[test]
    fn two_by_two_spectrum() {
        let s = eigendecompose(&DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0])).unwrap();
        assert!((s.eigenvalues[0] - 3.0).abs() < 1e-12);
        assert!((s.eigenvalues[1] - 1.0).abs() < 1e-12);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((s.eigenvectors[(0, 0)] - r).abs() < 1e-12);
        assert!((s.eigenvectors[(1, 0)] - r).abs() < 1e-12);
    }

    #[test]
    fn random_psd_reconstruction() {
        let b = draw_sketch(10, 10, 5).unwrap().omega;
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(10, |i, _| {
            10f64.powi(-(i as i32))
        }));
        let h = &b * d * b.transpose();
        let h = (&h + h.transpose()) * 0.5;
        let s = eigendecompose(&h).unwrap();
        assert!((s.reconstruct() - &h).amax() < 1e-8 * h.amax());
        assert!(
            (s.eigenvectors.tr_mul(&s.eigenvectors) - DMatrix::identity(10, 10)).amax() < 1e-10
        );
        assert!(s.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn non_symmetric_rejected() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(matches!(eigendecompose(&h), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn sign_convention() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 2.0]);
        let s = eigendecompose(&h).unwrap();
        for col in s.eigenvectors.column_iter() {
            let pivot = col
                .iter()
                .copied()
                .fold(0.0f64, |b, v| if v.abs() > b.abs() { v } else { b });
            assert!(pivot > 0.0);
        }
    }

    #[test]
    fn split_examples() {
        assert_eq!(split_stiff(&[0.9, 0.05, 0.05], 0.90).unwrap(), 1);
        assert_eq!(split_stiff(&[0.5, 0.4, 0.1], 0.90).unwrap(), 2);
        assert!(matches!(
            split_stiff(&[0.0, 0.0], 0.9),
            Err(Error::ZeroSpectrum)
        ));
        assert!(split_stiff(&[1.0], 0.0).is_err());
        assert_eq!(split_stiff(&[1.0, 1e-3, 1e-6], 1.0).unwrap(), 3);
    }

    #[test]
    fn prune_examples() {
        // stiff eigenvalue 1.0 then sloppy (1e-3, 1e-5, 1e-9); threshold 1e-7
        let keep = prune_sloppy(&[1.0, 1e-3, 1e-5, 1e-9], 1, 1e-4).unwrap();
        assert_eq!(keep, vec![1, 2]);
        let keep = prune_sloppy(&[1.0, 0.1, 0.1, 0.1], 1, 1e-4).unwrap();
        assert_eq!(keep, vec![1, 2, 3]);
        assert!(prune_sloppy(&[1.0, 0.5], 2, 1e-4).unwrap().is_empty());
    }

    #[test]
    fn lift_examples() {
        let u = rotation(0.3);
        assert_eq!(lift(&DMatrix::identity(2, 2), &u).unwrap(), u);
        let omega = draw_sketch(6, 3, 11).unwrap().omega;
        assert_eq!(lift(&omega, &DMatrix::identity(3, 3)).unwrap(), omega);
        let u3 = draw_sketch(3, 2, 12).unwrap().omega;
        let v = lift(&omega, &u3).unwrap();
        assert!((v.tr_mul(&v) - DMatrix::identity(2, 2)).amax() < 1e-10);
        assert!(lift(&omega, &DMatrix::identity(2, 2)).is_err());
    }

    #[test]
    fn misalignment_examples() {
        let e1 = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let e2 = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        assert_eq!(misalignment(&e1, &e1).unwrap(), 0.0);
        assert!((misalignment(&e1, &e2).unwrap() - 1.0).abs() < 1e-15);
        for alpha in [0.01f64, 0.3, 1.0, 1.5] {
            let v = DMatrix::from_column_slice(2, 1, &[alpha.cos(), alpha.sin()]);
            let d = misalignment(&e1, &v).unwrap();
            assert!((d - (1.0 - alpha.cos())).abs() < 1e-12);
        }
        assert!(matches!(
            misalignment(&DMatrix::zeros(2, 0), &e1),
            Err(Error::EmptyBasis)
        ));
    }

    #[test]
    fn partition_of_diagonal_spectrum() {
        let h = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 1e-2, 1e-4, 1e-10]));
        let s = eigendecompose(&h).unwrap();
        let p = SubspacePartition::from_spectrum(s, None, 0.9, 1e-4).unwrap();
        assert_eq!(p.k_s, 1);
        assert_eq!(p.sloppy_dim(), 2);
        assert_eq!(p.k_l, 1);
        let all = {
            let mut m = DMatrix::zeros(4, 3);
            m.set_column(0, &p.stiff.column(0));
            m.set_column(1, &p.sloppy.column(0));
            m.set_column(2, &p.sloppy.column(1));
            m
        };
        assert!((all.tr_mul(&all) - DMatrix::identity(3, 3)).amax() < 1e-8);
    }

    proptest! {
        #[test]
        fn split_monotone_in_gamma(
            mut values in prop::collection::vec(1e-8f64..1e3, 1..12),
            g1 in 0.05f64..1.0,
            g2 in 0.05f64..1.0,
        ) {
            values.sort_by(|a, b| b.total_cmp(a));
            let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
            prop_assert!(split_stiff(&values, lo).unwrap() <= split_stiff(&values, hi).unwrap());
        }

        #[test]
        fn prune_scale_invariant(
            mut values in prop::collection::vec(1e-12f64..1e3, 2..12),
            scale in 1e-6f64..1e6,
            ks in 0usize..11,
        ) {
            values.sort_by(|a, b| b.total_cmp(a));
            let ks = ks % values.len();
            // exact powers of two keep the comparison free of rounding
            let scale = 2f64.powi(scale.log2().round() as i32);
            let scaled: Vec<f64> = values.iter().map(|v| v * scale).collect();
            prop_assert_eq!(
                prune_sloppy(&values, ks, 1e-4).unwrap(),
                prune_sloppy(&scaled, ks, 1e-4).unwrap()
            );
        }

        #[test]
        fn misalignment_measures_subspaces(seed in 0u64..500, k in 1usize..4) {
            let a = draw_sketch(6, k, seed).unwrap().omega;
            let b = draw_sketch(6, k, seed + 1000).unwrap().omega;
            let q = draw_sketch(k, k, seed + 2000).unwrap().omega;
            let d_ab = misalignment(&a, &b).unwrap();
            let d_ba = misalignment(&b, &a).unwrap();
            prop_assert!((d_ab - d_ba).abs() < 1e-12);
            let d_rot = misalignment(&(&a * &q), &b).unwrap();
            prop_assert!((d_ab - d_rot).abs() < 1e-10);
            prop_assert!((0.0..=1.0).contains(&d_ab));
        }
    }
}
