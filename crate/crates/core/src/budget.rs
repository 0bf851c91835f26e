//! Efficiency accounting and lateral fiber-coupling estimates.
//!
//! Uncertainties propagate to first order as relative errors in quadrature.
//! [`monte_carlo_source_efficiency`] cross-checks that propagation by
//! sampling Gaussian inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measured::Measured;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub name: String,
    pub efficiency: f64,
    #[serde(default)]
    pub abs_uncertainty: f64,
}

impl Stage {
    pub fn new(name: impl Into<String>, efficiency: f64, abs_uncertainty: f64) -> Self {
        Self { name: name.into(), efficiency, abs_uncertainty }
    }

    fn measured(&self) -> Measured {
        Measured::new(self.efficiency, self.abs_uncertainty)
    }
}

/// Ordered loss stages between the collection fiber and the detector clicks.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EfficiencyChain {
    #[serde(default)]
    pub stages: Vec<Stage>,
}

impl EfficiencyChain {
    pub fn new(stages: Vec<Stage>) -> Result<Self> {
        let c = Self { stages };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.stages.iter().enumerate() {
            if !(s.efficiency > 0.0 && s.efficiency <= 1.0) {
                return Err(Error::invalid(format!("chain.stages[{i}].efficiency"), "must lie in (0, 1]"));
            }
            if !(s.abs_uncertainty >= 0.0) || !s.abs_uncertainty.is_finite() {
                return Err(Error::invalid(
                    format!("chain.stages[{i}].abs_uncertainty"),
                    "must be finite and non-negative",
                ));
            }
        }
        Ok(())
    }

    pub fn product(&self) -> Measured {
        self.stages.iter().fold(Measured::exact(1.0), |acc, s| acc.mul(s.measured()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountrateObservation {
    pub label: String,
    /// Detector clicks per second.
    pub rate: f64,
    #[serde(default)]
    pub rate_uncertainty: f64,
    pub rep_rate: f64,
}

impl CountrateObservation {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate >= 0.0) || !self.rate.is_finite() {
            return Err(Error::invalid("observation.rate", "must be finite and non-negative"));
        }
        if !(self.rate_uncertainty >= 0.0) {
            return Err(Error::invalid("observation.rate_uncertainty", "must be non-negative"));
        }
        if !(self.rep_rate > 0.0) {
            return Err(Error::invalid("observation.rep_rate", "must be positive"));
        }
        Ok(())
    }
}

/// Clicks per excitation pulse, `eta = R / f`.
pub fn overall_efficiency(obs: &CountrateObservation) -> Result<Measured> {
    obs.validate()?;
    if obs.rate > obs.rep_rate {
        return Err(Error::Inconsistent(format!(
            "{}: {} clicks/s exceed the {} Hz repetition rate",
            obs.label, obs.rate, obs.rep_rate
        )));
    }
    Ok(Measured::new(obs.rate / obs.rep_rate, obs.rate_uncertainty / obs.rep_rate))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceEfficiency {
    pub value: Measured,
    /// Set when the inferred efficiency exceeds one.
    pub inconsistent: bool,
}

/// Divides out the chain: `eta_src = eta_overall / prod(stages)`.
pub fn infer_source_efficiency(eta_overall: Measured, chain: &EfficiencyChain) -> Result<SourceEfficiency> {
    chain.validate()?;
    let prod = chain.product();
    let value = if eta_overall.value == 0.0 {
        Measured::new(0.0, eta_overall.err / prod.value)
    } else {
        eta_overall.div(prod)
    };
    Ok(SourceEfficiency { value, inconsistent: value.value > 1.0 })
}

/// Expected detector click rate, `R = eta_src * prod(stages) * f`.
pub fn forward_countrate(eta_src: f64, chain: &EfficiencyChain, rep_rate: f64) -> Result<f64> {
    chain.validate()?;
    if !(0.0..=1.0).contains(&eta_src) {
        return Err(Error::invalid("eta_src", "must lie in [0, 1]"));
    }
    if !(rep_rate > 0.0) {
        return Err(Error::invalid("rep_rate", "must be positive"));
    }
    Ok(eta_src * chain.product().value * rep_rate)
}

/// Monte Carlo estimate of `eta_overall / prod(stages)` with Gaussian inputs.
/// Returns the sample mean and standard deviation.
pub fn monte_carlo_source_efficiency(
    eta_overall: Measured,
    chain: &EfficiencyChain,
    samples: usize,
    seed: u64,
) -> Result<Measured> {
    chain.validate()?;
    if samples < 2 {
        return Err(Error::invalid("samples", "at least two samples are needed"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |m: Measured| Normal::new(m.value, m.err).map_err(|e| Error::invalid("uncertainty", e.to_string()));
    let top = normal(eta_overall)?;
    let stages = chain.stages.iter().map(|s| normal(s.measured())).collect::<Result<Vec<_>>>()?;
    let (mut sum, mut sum2) = (0.0, 0.0);
    for _ in 0..samples {
        let mut v = top.sample(&mut rng);
        for s in &stages {
            v /= s.sample(&mut rng);
        }
        sum += v;
        sum2 += v * v;
    }
    let n = samples as f64;
    let mean = sum / n;
    Ok(Measured::new(mean, ((sum2 - n * mean * mean) / (n - 1.0)).max(0.0).sqrt()))
}

/// Fundamental-mode field with a Gaussian profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianMode {
    /// 1/e^2 intensity radius in micrometres.
    pub waist: f64,
    pub wavelength: f64,
}

impl GaussianMode {
    pub fn new(waist: f64, wavelength: f64) -> Result<Self> {
        if !(waist > 0.0) || !waist.is_finite() {
            return Err(Error::invalid("mode.waist", "must be positive"));
        }
        Ok(Self { waist, wavelength })
    }
}

/// Marcuse estimate of the fundamental mode radius of a step-index fiber.
/// Lengths in micrometres.
pub fn marcuse_waist(core_radius: f64, numerical_aperture: f64, wavelength: f64) -> Result<f64> {
    if !(core_radius > 0.0 && numerical_aperture > 0.0 && wavelength > 0.0) {
        return Err(Error::Domain("fiber parameters must be positive".into()));
    }
    let v = 2.0 * std::f64::consts::PI * core_radius * numerical_aperture / wavelength;
    if !(0.8..=2.5).contains(&v) {
        return Err(Error::Domain(format!("V = {v:.3} is outside the range where the estimate holds")));
    }
    Ok(core_radius * (0.65 + 1.619 * v.powf(-1.5) + 2.879 * v.powi(-6)))
}

/// Core radius, numerical aperture and design wavelength of the pigtail.
pub const UHNA3_CORE_RADIUS_UM: f64 = 0.9;
pub const UHNA3_NA: f64 = 0.35;
pub const DESIGN_WAVELENGTH_UM: f64 = 0.9395;

/// Fiber mode at the design wavelength, and a cavity mode matched to it.
pub fn default_modes() -> (GaussianMode, GaussianMode) {
    let w = marcuse_waist(UHNA3_CORE_RADIUS_UM, UHNA3_NA, DESIGN_WAVELENGTH_UM).expect("valid constants");
    let m = GaussianMode { waist: w, wavelength: DESIGN_WAVELENGTH_UM * 1e3 };
    (m, m)
}

/// Power coupling at lateral offset `d`, relative to the centred value.
pub fn lateral_coupling(cavity: &GaussianMode, fiber: &GaussianMode, d: f64) -> Result<f64> {
    if !(d >= 0.0) {
        return Err(Error::invalid("offset", "must be non-negative"));
    }
    let s = cavity.waist.powi(2) + fiber.waist.powi(2);
    Ok((-2.0 * d * d / s).exp())
}

pub fn lateral_coupling_xy(cavity: &GaussianMode, fiber: &GaussianMode, dx: f64, dy: f64) -> Result<f64> {
    lateral_coupling(cavity, fiber, dx.hypot(dy))
}

/// Absolute power overlap of two centred Gaussian modes.
pub fn mode_mismatch_coupling(a: &GaussianMode, b: &GaussianMode) -> f64 {
    (2.0 * a.waist * b.waist / (a.waist.powi(2) + b.waist.powi(2))).powi(2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub label: String,
    pub eta_overall: Measured,
    pub eta_source: Measured,
    pub inconsistent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub rows: Vec<BudgetRow>,
    pub stages: Vec<Stage>,
    pub chain_product: Measured,
    pub method: String,
    /// Monte Carlo cross-check per row when requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub monte_carlo: Option<Vec<Measured>>,
    /// Report-only brightness comparisons, never used as gates.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub intensity_ratios: Vec<IntensityRatio>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityRatio {
    pub label: String,
    pub measured: Measured,
    pub simulated: f64,
}

/// Source efficiencies for a batch of observations through one chain.
pub fn budget_report(
    observations: &[CountrateObservation],
    chain: &EfficiencyChain,
    monte_carlo: Option<(usize, u64)>,
) -> Result<BudgetReport> {
    let mut rows = Vec::with_capacity(observations.len());
    let mut mc = monte_carlo.map(|_| Vec::new());
    for obs in observations {
        let eta = overall_efficiency(obs)?;
        let src = infer_source_efficiency(eta, chain)?;
        if let (Some(v), Some((n, seed))) = (mc.as_mut(), monte_carlo) {
            v.push(monte_carlo_source_efficiency(eta, chain, n, seed)?);
        }
        rows.push(BudgetRow { label: obs.label.clone(), eta_overall: eta, eta_source: src.value, inconsistent: src.inconsistent });
    }
    Ok(BudgetReport {
        rows,
        stages: chain.stages.clone(),
        chain_product: chain.product(),
        method: "first-order relative quadrature".into(),
        monte_carlo: mc,
        intensity_ratios: Vec::new(),
    })
}
