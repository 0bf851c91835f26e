//! Pulsed emission from a Purcell-enhanced two-level emitter.
//!
//! Each excitation pulse populates the emitter with a saturating probability,
//! the photon leaves after a (possibly bi-exponential) delay, and its carrier
//! frequency wanders according to an Ornstein-Uhlenbeck spectral-diffusion
//! process sampled at every pulse. A small fraction of pulses yields a second,
//! independent photon.

use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{SeedTree, Stream};

/// Radiative, dephasing and spectral-diffusion parameters of the emitter.
///
/// Times are in picoseconds except `sd_tau_c` (nanoseconds); angular
/// frequencies are in rad/ps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmitterParams {
    pub t1_fast: f64,
    pub t1_slow: f64,
    pub slow_fraction: f64,
    pub dephasing_rate: f64,
    /// Additional pure dephasing per unit of `P/P_sat`.
    #[serde(default)]
    pub dephasing_power_coeff: f64,
    pub sd_sigma: f64,
    pub sd_tau_c: f64,
    pub p_multi: f64,
    #[serde(default = "default_sat_exponent")]
    pub p_sat_exponent: f64,
}

fn default_sat_exponent() -> f64 {
    1.0
}

impl Default for EmitterParams {
    fn default() -> Self {
        Self {
            t1_fast: 77.0,
            t1_slow: 650.0,
            slow_fraction: 0.0,
            dephasing_rate: 0.0,
            dephasing_power_coeff: 0.0,
            sd_sigma: 0.0,
            sd_tau_c: 1.0,
            p_multi: 0.0,
            p_sat_exponent: 1.0,
        }
    }
}

fn non_negative(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(field, format!("must be finite and non-negative, got {v}")))
    }
}

impl EmitterParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.t1_fast.is_finite() && self.t1_fast > 0.0) {
            return Err(Error::invalid("emitter.t1_fast", "must be positive"));
        }
        if !(self.t1_slow.is_finite() && self.t1_slow >= self.t1_fast) {
            return Err(Error::invalid("emitter.t1_slow", "must be >= t1_fast"));
        }
        if !(0.0..1.0).contains(&self.slow_fraction) {
            return Err(Error::invalid("emitter.slow_fraction", "must lie in [0, 1)"));
        }
        non_negative("emitter.dephasing_rate", self.dephasing_rate)?;
        non_negative("emitter.dephasing_power_coeff", self.dephasing_power_coeff)?;
        non_negative("emitter.sd_sigma", self.sd_sigma)?;
        if !(self.sd_tau_c.is_finite() && self.sd_tau_c > 0.0) {
            return Err(Error::invalid("emitter.sd_tau_c", "must be positive"));
        }
        non_negative("emitter.p_multi", self.p_multi)?;
        if self.p_multi > 0.5 {
            return Err(Error::invalid("emitter.p_multi", "must be <= 0.5"));
        }
        non_negative("emitter.p_sat_exponent", self.p_sat_exponent)?;
        Ok(())
    }

    /// Radiative decay rate of the fast component, 1/ps.
    pub fn gamma(&self) -> f64 {
        1.0 / self.t1_fast
    }

    /// Mean of the bi-exponential decay-time distribution.
    pub fn mean_decay_time(&self) -> f64 {
        (1.0 - self.slow_fraction) * self.t1_fast + self.slow_fraction * self.t1_slow
    }

    /// Folds power-induced dephasing into `dephasing_rate` for a given `P/P_sat`.
    pub fn at_power(&self, power_ratio: f64) -> Self {
        Self {
            dephasing_rate: self.dephasing_rate + self.dephasing_power_coeff * power_ratio,
            dephasing_power_coeff: 0.0,
            ..*self
        }
    }

    /// `p = 1 - exp(-k P/P_sat)`.
    pub fn occupation_probability(&self, power_ratio: f64) -> Result<f64> {
        occupation_probability(power_ratio, self.p_sat_exponent)
    }
}

/// Saturating excitation law `1 - exp(-k P/P_sat)`.
pub fn occupation_probability(power_ratio: f64, sat_exponent: f64) -> Result<f64> {
    if power_ratio.is_nan() || power_ratio < 0.0 {
        return Err(Error::Domain(format!(
            "power ratio must be non-negative, got {power_ratio}"
        )));
    }
    if power_ratio.is_infinite() {
        return Ok(if sat_exponent > 0.0 { 1.0 } else { 0.0 });
    }
    Ok(-(-power_ratio * sat_exponent).exp_m1())
}

/// Draws one emission delay from the bi-exponential mixture, in ps.
pub fn sample_decay_time<R: Rng + ?Sized>(params: &EmitterParams, rng: &mut R) -> f64 {
    let tau = if params.slow_fraction > 0.0 && rng.random::<f64>() < params.slow_fraction {
        params.t1_slow
    } else {
        params.t1_fast
    };
    let e: f64 = rng.sample(Exp1);
    e * tau
}

/// Advances the spectral-diffusion detuning by `dt_ns` with the exact OU update.
pub fn step_spectral_diffusion<R: Rng + ?Sized>(
    detuning_prev: f64,
    dt_ns: f64,
    params: &EmitterParams,
    rng: &mut R,
) -> f64 {
    if params.sd_sigma == 0.0 {
        return 0.0;
    }
    if dt_ns <= 0.0 {
        return detuning_prev;
    }
    let decay = (-dt_ns / params.sd_tau_c).exp();
    let spread = params.sd_sigma * (-(-2.0 * dt_ns / params.sd_tau_c).exp_m1()).sqrt();
    let z: f64 = rng.sample(StandardNormal);
    detuning_prev * decay + spread * z
}

/// Two-photon wavepacket overlap of a pair of emission events.
///
/// Product of the pure-dephasing factor `G/(G + 2g*)` and a Lorentzian factor in
/// the detuning difference, with total linewidth `G + 2g*`.
pub fn pair_overlap(e1: &EmissionEvent, e2: &EmissionEvent, params: &EmitterParams) -> f64 {
    overlap_for_detuning(e1.detuning - e2.detuning, params)
}

pub fn overlap_for_detuning(delta_omega: f64, params: &EmitterParams) -> f64 {
    let gamma = params.gamma();
    let total = gamma + 2.0 * params.dephasing_rate;
    let t2 = total * total;
    (gamma / total) * t2 / (t2 + delta_omega * delta_omega)
}

/// Integer-picosecond laser clock without cumulative drift.
///
/// Pulse `k` fires at `round(k * 1e12 / f)` ps, computed exactly in integers, so
/// non-integer periods (781.25 ps at 1.28 GHz) alternate between neighbouring
/// integers while the long-run rate stays exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clock {
    rep_rate_hz: u64,
}

const PS_PER_S: u128 = 1_000_000_000_000;

impl Clock {
    pub fn new(rep_rate_hz: u64) -> Result<Self> {
        if rep_rate_hz == 0 {
            return Err(Error::invalid("excitation.rep_rate", "must be positive"));
        }
        if rep_rate_hz as u128 > PS_PER_S {
            return Err(Error::invalid(
                "excitation.rep_rate",
                "period shorter than 1 ps is not representable",
            ));
        }
        Ok(Self { rep_rate_hz })
    }

    pub fn rep_rate_hz(&self) -> u64 {
        self.rep_rate_hz
    }

    pub fn period_exact(&self) -> f64 {
        1e12 / self.rep_rate_hz as f64
    }

    /// Whole picoseconds in one period (781 at 1.28 GHz).
    pub fn period_floor(&self) -> u64 {
        (PS_PER_S / self.rep_rate_hz as u128) as u64
    }

    pub fn pulse_time(&self, k: u64) -> u64 {
        let f = self.rep_rate_hz as u128;
        ((2 * k as u128 * PS_PER_S + f) / (2 * f)) as u64
    }
}

/// Laser settings for one acquisition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExcitationConfig {
    pub rep_rate: u64,
    pub n_pulses: u64,
    pub power_ratio: f64,
    pub seed: u64,
    /// When set, every clock cycle carries a second pulse this many ps later.
    #[serde(default)]
    pub doublet_spacing: Option<u64>,
    /// Metadata only; the excitation wavelength has no dynamical role.
    #[serde(default)]
    pub wavelength_nm: Option<f64>,
}

impl ExcitationConfig {
    pub fn validate(&self) -> Result<Clock> {
        let clock = Clock::new(self.rep_rate)?;
        if self.n_pulses == 0 {
            return Err(Error::invalid("excitation.n_pulses", "must be >= 1"));
        }
        if self.power_ratio.is_nan() || self.power_ratio < 0.0 {
            return Err(Error::invalid("excitation.power_ratio", "must be non-negative"));
        }
        if let Some(s) = self.doublet_spacing {
            if s == 0 || s >= clock.period_floor() {
                return Err(Error::invalid(
                    "excitation.doublet_spacing",
                    "must be positive and shorter than the repetition period",
                ));
            }
        }
        Ok(clock)
    }

    pub fn clock(&self) -> Result<Clock> {
        Clock::new(self.rep_rate)
    }
}

pub const FLAG_MULTI_PARTNER: u8 = 0b01;
pub const FLAG_DOUBLET_SECOND: u8 = 0b10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmissionEvent {
    /// Clock cycle that triggered the emission.
    pub pulse_index: u64,
    pub time: u64,
    pub detuning: f64,
    pub is_multi_partner: bool,
    /// Emitted after the second pulse of a doublet.
    pub from_doublet_second: bool,
}

impl EmissionEvent {
    pub fn flags(&self) -> u8 {
        let mut f = 0;
        if self.is_multi_partner {
            f |= FLAG_MULTI_PARTNER;
        }
        if self.from_doublet_second {
            f |= FLAG_DOUBLET_SECOND;
        }
        f
    }
}

/// A generated emission record plus the clock it was generated on.
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionStream {
    pub events: Vec<EmissionEvent>,
    pub clock: Clock,
    pub n_pulses: u64,
    /// End of the last clock cycle, or later if a tail photon overran it.
    pub duration: u64,
}

/// Simulates `cfg.n_pulses` clock cycles of pulsed emission.
pub fn generate_stream(params: &EmitterParams, cfg: &ExcitationConfig) -> Result<EmissionStream> {
    params.validate()?;
    let clock = cfg.validate()?;

    // Leave generous headroom above the last pulse for decay tails and jitter.
    let end = clock.pulse_time(cfg.n_pulses) as u128;
    if cfg.n_pulses >= u64::MAX / 4 || end > (u64::MAX / 4) as u128 {
        return Err(Error::Range(format!(
            "{} pulses at {} Hz overflow the picosecond clock",
            cfg.n_pulses, cfg.rep_rate
        )));
    }

    let p_occ = params.occupation_probability(cfg.power_ratio)?;
    let params = params.at_power(cfg.power_ratio);
    let mut rng = SeedTree::new(cfg.seed).rng(Stream::Emission);

    let sub_pulses: Vec<u64> = match cfg.doublet_spacing {
        Some(s) => vec![0, s],
        None => vec![0],
    };
    let expected = (cfg.n_pulses as f64 * sub_pulses.len() as f64 * p_occ * (1.0 + params.p_multi))
        .ceil() as usize;
    let mut events = Vec::with_capacity(expected + expected / 64 + 16);

    // Stationary start for the spectral-diffusion process.
    let mut detuning = if params.sd_sigma > 0.0 {
        let z: f64 = rng.sample(StandardNormal);
        params.sd_sigma * z
    } else {
        0.0
    };
    let mut last_pulse_time = 0u64;

    for k in 0..cfg.n_pulses {
        let base = clock.pulse_time(k);
        for (sub, &offset) in sub_pulses.iter().enumerate() {
            let t_pulse = base + offset;
            if params.sd_sigma > 0.0 {
                let dt_ns = (t_pulse - last_pulse_time) as f64 * 1e-3;
                detuning = step_spectral_diffusion(detuning, dt_ns, &params, &mut rng);
            }
            last_pulse_time = t_pulse;

            let u_occ: f64 = rng.random();
            let u_multi: f64 = rng.random();
            if u_occ >= p_occ {
                continue;
            }
            let second = sub == 1;
            let t = sample_decay_time(&params, &mut rng);
            events.push(EmissionEvent {
                pulse_index: k,
                time: t_pulse + t.round() as u64,
                detuning,
                is_multi_partner: false,
                from_doublet_second: second,
            });
            if u_multi < params.p_multi {
                let t = sample_decay_time(&params, &mut rng);
                events.push(EmissionEvent {
                    pulse_index: k,
                    time: t_pulse + t.round() as u64,
                    detuning,
                    is_multi_partner: true,
                    from_doublet_second: second,
                });
            }
        }
    }

    // Stable sort keeps ties in generation order, so the result is a pure
    // function of the seed.
    events.sort_by_key(|e| e.time);
    let period_end = clock.pulse_time(cfg.n_pulses);
    let duration = events
        .last()
        .map(|e| e.time + 1)
        .unwrap_or(0)
        .max(period_end);

    Ok(EmissionStream {
        events,
        clock,
        n_pulses: cfg.n_pulses,
        duration,
    })
}
