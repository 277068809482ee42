use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::BoundsBox;

use super::ObservableModel;

const BOLTZMANN_EV: f64 = 8.617_333_262e-5;
const BOLTZMANN_SI: f64 = 1.380_649e-23;
const ATOMIC_MASS: f64 = 1.660_539_066_60e-27;
const PASCAL_PER_TORR: f64 = 133.322_368;

const MAX_STEPS: usize = 10_000;
const STATIONARY_TOL: f64 = 1e-10;

/// Fixed constants of the toy surface model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KineticsConstants {
    /// Physisorption site density (cm⁻²).
    pub f_sites: f64,
    /// Chemisorption site density (cm⁻²).
    pub s_sites: f64,
    /// Atomic oxygen fraction of the gas.
    pub o_fraction: f64,
    /// Attempt frequency of surface hopping for recombination between
    /// physisorbed atoms (s⁻¹). Zero disables that channel.
    pub nu_lh: f64,
    /// Prefactor of the desorption frequency (s⁻¹).
    pub desorption_scale: f64,
    /// Mass of the impinging atom (amu).
    pub atom_mass_amu: f64,
}

impl Default for KineticsConstants {
    fn default() -> Self {
        Self {
            f_sites: 1e15,
            s_sites: 1e13,
            o_fraction: 0.1,
            nu_lh: 1e13,
            desorption_scale: 1e15,
            atom_mass_amu: 16.0,
        }
    }
}

/// Physical parameter values of the toy model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KineticsParameters {
    /// Sticking probability onto physisorption sites.
    pub s_ads: f64,
    /// Sticking probability onto chemisorption sites.
    pub s_chem: f64,
    /// Steric factor of gas-phase atoms recombining with chemisorbed atoms.
    pub s_er: f64,
    /// Activation energy of recombination between physisorbed atoms (eV).
    pub e_lh: f64,
    /// Desorption coefficients: `ν_d = scale·(A + B·exp(E/kT))`.
    pub a_des: f64,
    pub b_des: f64,
    /// eV.
    pub e_des: f64,
    /// Activation energy of gas-phase recombination with chemisorbed atoms (eV).
    pub e_er: f64,
}

impl KineticsParameters {
    pub const NAMES: [&'static str; 8] = [
        "s_ads", "s_chem", "s_er", "e_lh", "a_des", "b_des", "e_des", "e_er",
    ];

    pub fn from_slice(p: &[f64]) -> Result<Self> {
        if p.len() != 8 {
            return Err(Error::DimensionMismatch {
                expected: 8,
                got: p.len(),
            });
        }
        Ok(Self {
            s_ads: p[0],
            s_chem: p[1],
            s_er: p[2],
            e_lh: p[3],
            a_des: p[4],
            b_des: p[5],
            e_des: p[6],
            e_er: p[7],
        })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.s_ads,
            self.s_chem,
            self.s_er,
            self.e_lh,
            self.a_des,
            self.b_des,
            self.e_des,
            self.e_er,
        ]
    }
}

/// Per-site rates (s⁻¹) at one experimental condition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceRates {
    /// Impinging atom flux (cm⁻² s⁻¹).
    pub flux: f64,
    pub adsorption_f: f64,
    pub desorption_f: f64,
    pub recombination_lh: f64,
    pub adsorption_s: f64,
    pub recombination_er: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteadyState {
    pub theta_f: f64,
    pub theta_s: f64,
    /// Recombination probability: atoms lost per impinging atom.
    pub gamma: f64,
    /// Implicit time steps taken before the Newton polish.
    pub steps: usize,
}

/// Two-coverage surface model: physisorbed atoms (F sites) that desorb and
/// recombine pairwise, and chemisorbed atoms (S sites) that recombine with
/// atoms arriving from the gas.
///
/// Inputs are `(pressure [Torr], wall temperature [K])`; the gas is taken to
/// be at wall temperature. The observable is the recombination probability.
#[derive(Debug, Clone)]
pub struct ToySurfaceKinetics {
    bounds: BoundsBox,
    constants: KineticsConstants,
}

impl Default for ToySurfaceKinetics {
    fn default() -> Self {
        Self::new(KineticsConstants::default())
    }
}

impl ToySurfaceKinetics {
    pub fn new(constants: KineticsConstants) -> Self {
        // invented ranges chosen so every parameter moves the observable
        // over the default condition grid
        let lower = vec![1e-3, 0.0, 0.0, 0.2, 0.0, 0.0, -0.25, 0.0];
        let upper = vec![0.1, 0.05, 1.0, 0.6, 2e-10, 2e-8, -0.05, 0.3];
        Self {
            bounds: BoundsBox::new(lower, upper).expect("static bounds are ordered"),
            constants,
        }
    }

    pub fn with_bounds(mut self, bounds: BoundsBox) -> Result<Self> {
        if bounds.dimension() != 8 {
            return Err(Error::DimensionMismatch {
                expected: 8,
                got: bounds.dimension(),
            });
        }
        self.bounds = bounds;
        Ok(self)
    }

    pub fn constants(&self) -> &KineticsConstants {
        &self.constants
    }

    /// Invented reference values used to generate synthetic data.
    pub fn default_parameters() -> KineticsParameters {
        KineticsParameters {
            s_ads: 0.02,
            s_chem: 0.01,
            s_er: 0.3,
            e_lh: 0.4,
            a_des: 5e-11,
            b_des: 5e-9,
            e_des: -0.15,
            e_er: 0.1,
        }
    }

    /// Pressures log-spaced over 0.2–10 Torr, temperatures evenly spaced
    /// over 253–323 K. Rows are `[pressure, temperature]`.
    pub fn condition_grid(n_pressure: usize, n_temperature: usize) -> Vec<Vec<f64>> {
        let spaced = |count: usize, lo: f64, hi: f64, i: usize| {
            if count <= 1 {
                lo
            } else {
                lo + (hi - lo) * i as f64 / (count - 1) as f64
            }
        };
        let mut out = Vec::with_capacity(n_pressure * n_temperature);
        for i in 0..n_pressure {
            let p = 10f64.powf(spaced(n_pressure, 0.2f64.log10(), 1.0, i));
            for j in 0..n_temperature {
                out.push(vec![p, spaced(n_temperature, 253.0, 323.0, j)]);
            }
        }
        out
    }

    pub fn rates(
        &self,
        p: &KineticsParameters,
        pressure: f64,
        t_wall: f64,
    ) -> Result<SurfaceRates> {
        if !(pressure > 0.0) || !(t_wall > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "condition needs positive pressure and temperature, got ({pressure}, {t_wall})"
            )));
        }
        let c = &self.constants;
        let mass = c.atom_mass_amu * ATOMIC_MASS;
        let density_cm3 =
            c.o_fraction * pressure * PASCAL_PER_TORR / (BOLTZMANN_SI * t_wall) * 1e-6;
        let mean_speed_cm =
            (8.0 * BOLTZMANN_SI * t_wall / (std::f64::consts::PI * mass)).sqrt() * 100.0;
        let flux = density_cm3 * mean_speed_cm / 4.0;
        let kt = BOLTZMANN_EV * t_wall;
        Ok(SurfaceRates {
            flux,
            adsorption_f: p.s_ads * flux / c.f_sites,
            desorption_f: c.desorption_scale * (p.a_des + p.b_des * (p.e_des / kt).exp()),
            recombination_lh: c.nu_lh * (-p.e_lh / kt).exp(),
            adsorption_s: p.s_chem * flux / c.s_sites,
            recombination_er: p.s_er * (-p.e_er / kt).exp() * flux / c.s_sites,
        })
    }

    /// Integrates the coverage equations from bare surfaces with implicit
    /// Euler steps of growing size until the time derivative vanishes, then
    /// polishes the fixed point with Newton iterations.
    pub fn steady_state(
        &self,
        p: &KineticsParameters,
        pressure: f64,
        t_wall: f64,
    ) -> Result<SteadyState> {
        let r = self.rates(p, pressure, t_wall)?;
        let all = [
            r.adsorption_f,
            r.desorption_f,
            r.recombination_lh,
            r.adsorption_s,
            r.recombination_er,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Simulation(format!("invalid surface rates {all:?}")));
        }
        let scale = all.iter().cloned().fold(0.0, f64::max);
        if scale == 0.0 {
            return Ok(SteadyState {
                theta_f: 0.0,
                theta_s: 0.0,
                gamma: 0.0,
                steps: 0,
            });
        }

        let df = |f: f64| {
            r.adsorption_f * (1.0 - f) - r.desorption_f * f - 2.0 * r.recombination_lh * f * f
        };
        let ddf = |f: f64| -r.adsorption_f - r.desorption_f - 4.0 * r.recombination_lh * f;
        let ds = |s: f64| r.adsorption_s * (1.0 - s) - r.recombination_er * s;
        let dds = -r.adsorption_s - r.recombination_er;
        let tol = STATIONARY_TOL * scale.max(1.0);

        let (mut f, mut s) = (0.0, 0.0);
        let mut dt = 1e-3 / scale;
        let mut steps = 0;
        while df(f).abs().max(ds(s).abs()) >= tol {
            if steps == MAX_STEPS {
                return Err(Error::Simulation(format!(
                    "coverages not stationary after {MAX_STEPS} steps at ({pressure} Torr, {t_wall} K)"
                )));
            }
            steps += 1;
            // backward Euler: solve y − y_prev − dt·F(y) = 0 per coverage
            let (f_prev, s_prev) = (f, s);
            for _ in 0..50 {
                let g = f - f_prev - dt * df(f);
                let step = g / (1.0 - dt * ddf(f));
                f -= step;
                if step.abs() <= 1e-15 * f.abs().max(1e-300) {
                    break;
                }
            }
            s = (s_prev + dt * r.adsorption_s) / (1.0 - dt * dds);
            if !f.is_finite() || !s.is_finite() {
                return Err(Error::Simulation("coverage integration diverged".into()));
            }
            dt *= 4.0;
        }
        for _ in 0..3 {
            let d = ddf(f);
            if d != 0.0 {
                f -= df(f) / d;
            }
            if dds != 0.0 {
                s -= ds(s) / dds;
            }
        }
        if !(0.0..=1.0).contains(&f) || !(0.0..=1.0).contains(&s) {
            return Err(Error::Simulation(format!(
                "coverages left [0, 1]: ({f}, {s})"
            )));
        }

        let c = &self.constants;
        let lost =
            2.0 * (c.f_sites * r.recombination_lh * f * f + c.s_sites * r.recombination_er * s);
        Ok(SteadyState {
            theta_f: f,
            theta_s: s,
            gamma: lost / r.flux,
            steps,
        })
    }
}

impl ObservableModel for ToySurfaceKinetics {
    fn parameter_names(&self) -> Vec<String> {
        KineticsParameters::NAMES
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    fn input_names(&self) -> Vec<String> {
        vec!["pressure_torr".into(), "t_wall_k".into()]
    }

    fn observable_names(&self) -> Vec<String> {
        vec!["gamma".into()]
    }

    fn bounds(&self) -> &BoundsBox {
        &self.bounds
    }

    fn predict(&self, physical: &[f64], inputs: &[f64]) -> Result<Vec<f64>> {
        if inputs.len() != 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                got: inputs.len(),
            });
        }
        let p = KineticsParameters::from_slice(physical)?;
        Ok(vec![self.steady_state(&p, inputs[0], inputs[1])?.gamma])
    }
}
