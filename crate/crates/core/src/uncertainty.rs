//! Parameter uncertainty from the curvature of the loss at the optimum.
//!
//! A parameter's interval is the distance along its axis at which a quadratic
//! model of the loss rises by `ΔΦ = fraction · Φ_final`:
//! `Δθ_i = √(2 ΔΦ (H⁻¹)_ii)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::subspace::eigendecompose;
use crate::types::BoundsBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParameterClass {
    Stiff,
    Sloppy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UncertaintyOptions {
    /// `ΔΦ` as a fraction of the final loss.
    pub fraction: f64,
    /// A parameter is stiff when its interval is shorter than this fraction
    /// of its box width.
    pub stiff_cutoff: f64,
}

impl Default for UncertaintyOptions {
    fn default() -> Self {
        Self {
            fraction: 0.01,
            stiff_cutoff: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyReport {
    /// Normalized units; infinite along directions the Hessian does not
    /// constrain.
    pub delta_theta: Vec<f64>,
    pub delta_phi_threshold: f64,
    pub classification: Vec<ParameterClass>,
}

/// Intervals in normalized coordinates, where every box has unit width.
pub fn parameter_uncertainty(
    h: &DMatrix<f64>,
    phi_final: f64,
    options: &UncertaintyOptions,
) -> Result<UncertaintyReport> {
    if !h.is_square() {
        return Err(Error::DimensionMismatch {
            expected: h.nrows(),
            got: h.ncols(),
        });
    }
    if !(phi_final > 0.0 && phi_final.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "final loss must be positive and finite, got {phi_final}"
        )));
    }
    if !(options.fraction > 0.0 && options.stiff_cutoff > 0.0) {
        return Err(Error::InvalidArgument(
            "fraction and stiff cutoff must be positive".into(),
        ));
    }
    let delta_phi = options.fraction * phi_final;
    let diag = inverse_diagonal(h)?;
    let delta_theta: Vec<f64> = diag.iter().map(|d| (2.0 * delta_phi * d).sqrt()).collect();
    let classification = delta_theta
        .iter()
        .map(|&d| {
            if d < options.stiff_cutoff {
                ParameterClass::Stiff
            } else {
                ParameterClass::Sloppy
            }
        })
        .collect();
    Ok(UncertaintyReport {
        delta_theta,
        delta_phi_threshold: delta_phi,
        classification,
    })
}

/// `diag(H⁻¹)` by Cholesky; when `H` is not positive definite, entries
/// touching a non-positive eigenvalue come back infinite.
fn inverse_diagonal(h: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = h.nrows();
    if let Some(chol) = h.clone().cholesky() {
        let inv = chol.inverse();
        return Ok((0..n).map(|i| inv[(i, i)]).collect());
    }
    log::warn!("Hessian is not positive definite; some intervals are unbounded");
    let spectrum = eigendecompose(h)?;
    let floor =
        spectrum.eigenvalues.first().copied().unwrap_or(0.0).abs() * f64::EPSILON * n as f64;
    Ok((0..n)
        .map(|i| {
            let mut acc = 0.0;
            for (j, &l) in spectrum.eigenvalues.iter().enumerate() {
                let v = spectrum.eigenvectors[(i, j)];
                if l <= floor {
                    if v.abs() > 1e-12 {
                        return f64::INFINITY;
                    }
                } else {
                    acc += v * v / l;
                }
            }
            acc
        })
        .collect())
}

fn finite_or_marker<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str("inf")
    }
}

/// One exported line of the report, in physical units.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UncertaintyRow {
    pub name: String,
    pub default: f64,
    pub optimized: f64,
    /// Half-width of the interval; `"inf"` when unbounded.
    #[serde(serialize_with = "finite_or_marker")]
    pub delta_theta: f64,
    #[serde(serialize_with = "finite_or_marker")]
    pub delta_theta_normalized: f64,
    pub class: ParameterClass,
}

/// Converts a normalized report to physical units for export.
pub fn uncertainty_rows(
    report: &UncertaintyReport,
    names: &[String],
    bounds: &BoundsBox,
    default_theta: &[f64],
    optimized_theta: &[f64],
) -> Result<Vec<UncertaintyRow>> {
    let n = report.delta_theta.len();
    for len in [
        names.len(),
        bounds.dimension(),
        default_theta.len(),
        optimized_theta.len(),
    ] {
        if len != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: len,
            });
        }
    }
    let default = crate::types::to_physical(default_theta, bounds)?;
    let optimized = crate::types::to_physical(optimized_theta, bounds)?;
    Ok((0..n)
        .map(|i| UncertaintyRow {
            name: names[i].clone(),
            default: default[i],
            optimized: optimized[i],
            delta_theta: report.delta_theta[i] * bounds.width(i),
            delta_theta_normalized: report.delta_theta[i],
            class: report.classification[i],
        })
        .collect())
}
