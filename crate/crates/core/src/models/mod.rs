//! Built-in residual problems: synthetic sloppy benchmarks and a toy
//! surface-kinetics simulator fitted against a dataset.

mod exponentials;
mod kinetics;
mod quadratic;

pub use exponentials::SumOfExponentials;
pub use kinetics::{
    KineticsConstants, KineticsParameters, SteadyState, SurfaceRates, ToySurfaceKinetics,
};
pub use quadratic::PrescribedSpectrumQuadratic;

use std::sync::Arc;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::hessian::{fd_jacobian, gauss_newton_hessian, DEFAULT_FD_STEP};
use crate::loss::{Condition, Dataset};
use crate::subspace::eigendecompose;
use crate::types::{to_physical, BoundsBox, Evaluator, Phase, ResidualProblem, Simulator};

/// A model predicting observables for one experimental condition from
/// physical parameter values.
pub trait ObservableModel: Send + Sync {
    fn parameter_names(&self) -> Vec<String>;
    fn input_names(&self) -> Vec<String>;
    fn observable_names(&self) -> Vec<String>;
    /// Physical range of each parameter; normalized coordinates map onto it.
    fn bounds(&self) -> &BoundsBox;
    fn predict(&self, physical: &[f64], inputs: &[f64]) -> Result<Vec<f64>>;

    fn dimension(&self) -> usize {
        self.bounds().dimension()
    }
}

/// Relative-error residuals of a model against a dataset, as a function of
/// normalized parameters.
pub struct DatasetProblem<M: ?Sized> {
    model: Arc<M>,
    dataset: Dataset,
    sqrt_weights: Option<Vec<f64>>,
}

impl<M: ObservableModel + ?Sized> DatasetProblem<M> {
    pub fn new(model: Arc<M>, dataset: Dataset) -> Result<Self> {
        dataset.validate()?;
        if dataset.input_names.len() != model.input_names().len()
            || dataset.observable_names.len() != model.observable_names().len()
        {
            return Err(Error::InvalidDataset(format!(
                "dataset has {} inputs / {} observables, model expects {} / {}",
                dataset.input_names.len(),
                dataset.observable_names.len(),
                model.input_names().len(),
                model.observable_names().len()
            )));
        }
        let sqrt_weights = dataset
            .weights
            .as_ref()
            .map(|w| w.iter().map(|v| v.sqrt()).collect());
        Ok(Self {
            model,
            dataset,
            sqrt_weights,
        })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn model(&self) -> &Arc<M> {
        &self.model
    }
}

impl<M: ObservableModel + ?Sized> Simulator for DatasetProblem<M> {
    fn dimension(&self) -> usize {
        self.model.dimension()
    }

    fn residual_len(&self) -> usize {
        self.dataset.residual_len()
    }

    fn residuals(&self, theta: &[f64]) -> Result<DVector<f64>> {
        let physical = to_physical(theta, self.model.bounds())?;
        let m = self.dataset.observables_per_condition();
        let mut out = DVector::zeros(self.residual_len());
        for (i, c) in self.dataset.conditions.iter().enumerate() {
            let predicted = self.model.predict(&physical, &c.inputs)?;
            for j in 0..m {
                let w = self.sqrt_weights.as_ref().map_or(1.0, |s| s[j]);
                out[i * m + j] = w * (c.observed[j] - predicted[j]) / c.observed[j];
            }
        }
        Ok(out)
    }
}

/// Observables predicted at normalized `theta_star`, perturbed by
/// multiplicative Gaussian noise of relative size `noise_rel`.
///
/// Conditions whose prediction is exactly zero cannot enter a relative-error
/// loss and are dropped. A draw that flips the sign of a prediction is
/// redrawn once, then clamped to 10% of the prediction.
pub fn generate_synthetic_dataset(
    model: &dyn ObservableModel,
    theta_star: &[f64],
    inputs: &[Vec<f64>],
    noise_rel: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(noise_rel >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise level must be non-negative, got {noise_rel}"
        )));
    }
    let physical = to_physical(theta_star, model.bounds())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut conditions = Vec::with_capacity(inputs.len());
    for x in inputs {
        let predicted = model.predict(&physical, x)?;
        // draw noise for every condition so later conditions do not depend on
        // which earlier ones were dropped
        let mut observed = Vec::with_capacity(predicted.len());
        let mut valid = true;
        for &p in &predicted {
            let mut e = p * (1.0 + noise_rel * rng.sample::<f64, _>(StandardNormal));
            if p != 0.0 && e.signum() != p.signum() {
                e = p * (1.0 + noise_rel * rng.sample::<f64, _>(StandardNormal));
                if e.signum() != p.signum() {
                    e = 0.1 * p;
                }
            }
            if p == 0.0 || !p.is_finite() {
                valid = false;
            }
            observed.push(e);
        }
        if valid {
            conditions.push(Condition {
                inputs: x.clone(),
                observed,
            });
        } else {
            log::debug!("dropping condition {x:?}: observable prediction is zero");
        }
    }
    if conditions.is_empty() {
        return Err(Error::InvalidDataset(
            "no condition produced a usable observable".into(),
        ));
    }
    Dataset::new(model.input_names(), model.observable_names(), conditions)
}

/// `log10(λ_max / λ_min)` of the unregularized Gauss-Newton Hessian at
/// `theta`. The smallest eigenvalue is floored at machine precision relative
/// to the largest.
pub fn sloppy_spectrum_selftest(problem: &ResidualProblem, theta: &[f64]) -> Result<f64> {
    let mut ev = Evaluator::new(problem).with_reflection(false);
    let (j, _) = fd_jacobian(&mut ev, theta, DEFAULT_FD_STEP, None, Phase::Geometry)?;
    let spectrum = eigendecompose(&gauss_newton_hessian(&j, 0.0))?;
    Ok(decades_spanned(&spectrum.eigenvalues))
}

pub fn decades_spanned(eigenvalues: &[f64]) -> f64 {
    let (Some(&max), Some(&min)) = (eigenvalues.first(), eigenvalues.last()) else {
        return 0.0;
    };
    if !(max > 0.0) {
        return 0.0;
    }
    (max / min.max(max * f64::EPSILON)).log10()
}
