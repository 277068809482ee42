use crate::error::{Error, Result};
use crate::types::BoundsBox;

use super::ObservableModel;

/// `y(t) = Σ_i exp(−k_i t)` with `n` decay rates. Fitting the rates from
/// samples of `y` is a classic sloppy problem: the data constrain a few
/// combinations of rates tightly and the rest barely at all.
#[derive(Debug, Clone)]
pub struct SumOfExponentials {
    bounds: BoundsBox,
}

impl SumOfExponentials {
    pub const DEFAULT_RATE_MAX: f64 = 5.0;

    /// Rates in `[0, rate_max]` for each of `n` terms.
    pub fn new(n: usize, rate_max: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument(
                "need at least one exponential".into(),
            ));
        }
        Ok(Self {
            bounds: BoundsBox::new(vec![0.0; n], vec![rate_max; n])?,
        })
    }

    /// Evenly spaced sample times in `[t_min, t_max]`.
    pub fn sample_times(count: usize, t_min: f64, t_max: f64) -> Vec<Vec<f64>> {
        match count {
            0 => Vec::new(),
            1 => vec![vec![t_min]],
            _ => (0..count)
                .map(|i| vec![t_min + (t_max - t_min) * i as f64 / (count - 1) as f64])
                .collect(),
        }
    }

    /// Reference rates spread geometrically over `[0.2, 2]·rate_max/5`,
    /// returned in normalized coordinates.
    pub fn reference_theta(&self) -> Vec<f64> {
        let n = self.dimension();
        (0..n)
            .map(|i| {
                let frac = if n == 1 {
                    0.5
                } else {
                    i as f64 / (n - 1) as f64
                };
                0.04 * 10f64.powf(frac)
            })
            .collect()
    }
}

impl ObservableModel for SumOfExponentials {
    fn parameter_names(&self) -> Vec<String> {
        (0..self.dimension())
            .map(|i| format!("k{}", i + 1))
            .collect()
    }

    fn input_names(&self) -> Vec<String> {
        vec!["t".into()]
    }

    fn observable_names(&self) -> Vec<String> {
        vec!["y".into()]
    }

    fn bounds(&self) -> &BoundsBox {
        &self.bounds
    }

    fn predict(&self, physical: &[f64], inputs: &[f64]) -> Result<Vec<f64>> {
        let t = inputs[0];
        Ok(vec![physical.iter().map(|k| (-k * t).exp()).sum()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{generate_synthetic_dataset, sloppy_spectrum_selftest, DatasetProblem};
    use crate::types::{ResidualProblem, Simulator};
    use std::sync::Arc;

    #[test]
    fn prediction_matches_closed_form() {
        let m = SumOfExponentials::new(2, 5.0).unwrap();
        let y = m.predict(&[1.0, 2.0], &[0.5]).unwrap()[0];
        assert!((y - ((-0.5f64).exp() + (-1.0f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn noiseless_data_has_zero_residual_at_truth() {
        let m = Arc::new(SumOfExponentials::new(4, 5.0).unwrap());
        let theta = m.reference_theta();
        let times = SumOfExponentials::sample_times(20, 0.1, 4.0);
        let data = generate_synthetic_dataset(m.as_ref(), &theta, &times, 0.0, 1).unwrap();
        let p = DatasetProblem::new(m, data).unwrap();
        assert_eq!(p.residuals(&theta).unwrap().amax(), 0.0);
    }

    #[test]
    fn spectrum_is_sloppy() {
        let m = Arc::new(SumOfExponentials::new(8, 5.0).unwrap());
        let theta = m.reference_theta();
        let times = SumOfExponentials::sample_times(40, 0.1, 4.0);
        let data = generate_synthetic_dataset(m.as_ref(), &theta, &times, 0.0, 1).unwrap();
        let p = ResidualProblem::new(DatasetProblem::new(m, data).unwrap());
        let d = sloppy_spectrum_selftest(&p, &theta).unwrap();
        assert!(d >= 6.0, "{d}");
    }
}
