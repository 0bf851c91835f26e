//! Declarative experiment description, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::{DetectorParams, HomConfig};
use crate::budget::{CountrateObservation, EfficiencyChain};
use crate::emitter::{EmitterParams, ExcitationConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BenchConfig {
    Hbt,
    /// Runs a co-polarized and a cross-polarized acquisition.
    Hom {
        delay: u64,
        #[serde(default)]
        coincidence_gate: Option<u64>,
    },
}

impl BenchConfig {
    pub fn hom(&self, copolarized: bool) -> Option<HomConfig> {
        match *self {
            BenchConfig::Hbt => None,
            BenchConfig::Hom { delay, coincidence_gate } => Some(HomConfig { delay, copolarized, coincidence_gate }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detectors {
    #[serde(default)]
    pub a: DetectorParams,
    #[serde(default)]
    pub b: DetectorParams,
}

impl Default for Detectors {
    fn default() -> Self {
        Self { a: DetectorParams::default(), b: DetectorParams::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default = "default_bin_width")]
    pub bin_width: u64,
    /// Peak integration window, ps. Defaults to one repetition period.
    #[serde(default)]
    pub window: Option<f64>,
    #[serde(default = "default_side_peaks")]
    pub side_peaks: usize,
    /// Lowest side-peak order used to normalise HOM histograms.
    #[serde(default = "default_min_order")]
    pub hom_min_order: usize,
    /// `g2(0)` used for the multi-photon visibility correction. Without it the
    /// analysis reports the raw visibility only.
    #[serde(default)]
    pub correction_g2: Option<f64>,
    /// Bin width of the arrival-time trace, ps.
    #[serde(default = "default_trace_bin")]
    pub trace_bin_width: u64,
}

fn default_bin_width() -> u64 {
    4
}
fn default_side_peaks() -> usize {
    10
}
fn default_min_order() -> usize {
    2
}
fn default_trace_bin() -> u64 {
    4
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            bin_width: default_bin_width(),
            window: None,
            side_peaks: default_side_peaks(),
            hom_min_order: default_min_order(),
            correction_g2: None,
            trace_bin_width: default_trace_bin(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub emitter: EmitterParams,
    pub excitation: ExcitationConfig,
    pub bench: BenchConfig,
    #[serde(default)]
    pub detectors: Detectors,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn period(&self) -> f64 {
        1e12 / self.excitation.rep_rate as f64
    }

    pub fn window(&self) -> f64 {
        self.analysis.window.unwrap_or_else(|| self.period())
    }

    /// Per-field and cross-field checks.
    pub fn validate(&self) -> Result<()> {
        self.emitter.validate()?;
        let clock = self.excitation.validate()?;
        self.detectors.a.validate("detectors.a")?;
        self.detectors.b.validate("detectors.b")?;
        if let BenchConfig::Hom { delay, coincidence_gate } = self.bench {
            HomConfig { delay, copolarized: true, coincidence_gate }.validate()?;
        }
        let a = &self.analysis;
        if a.bin_width == 0 {
            return Err(Error::invalid("analysis.bin_width", "must be positive"));
        }
        if a.trace_bin_width == 0 {
            return Err(Error::invalid("analysis.trace_bin_width", "must be positive"));
        }
        if a.side_peaks == 0 {
            return Err(Error::invalid("analysis.side_peaks", "must be >= 1"));
        }
        if let Some(w) = a.window {
            if !(w > 0.0) || w > clock.period_exact() {
                return Err(Error::invalid(
                    "analysis.window",
                    format!("must be positive and at most the {} ps period", clock.period_exact()),
                ));
            }
        }
        if matches!(self.bench, BenchConfig::Hom { .. }) && a.hom_min_order > a.side_peaks {
            return Err(Error::invalid("analysis.hom_min_order", "exceeds analysis.side_peaks"));
        }
        if let Some(g) = a.correction_g2 {
            if !(g >= 0.0) {
                return Err(Error::invalid("analysis.correction_g2", "must be non-negative"));
            }
        }
        Ok(())
    }
}

/// Built-in scenarios.
pub const PRESETS: &[(&str, &str)] = &[
    ("paper-80mhz", include_str!("../presets/paper-80mhz.toml")),
    ("paper-ghz", include_str!("../presets/paper-ghz.toml")),
    ("paper-hom-2ns", include_str!("../presets/paper-hom-2ns.toml")),
    ("paper-hom-12ns", include_str!("../presets/paper-hom-12ns.toml")),
];

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let (_, text) = PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| {
            let known: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            Error::invalid("preset", format!("unknown preset `{name}`; known: {}", known.join(", ")))
        })?;
    ExperimentConfig::from_toml(text)
}

/// Input of the `budget` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetConfig {
    #[serde(default)]
    pub chain: EfficiencyChain,
    #[serde(default, rename = "observation")]
    pub observations: Vec<CountrateObservation>,
    /// Sample count for the Monte Carlo cross-check; zero disables it.
    #[serde(default)]
    pub monte_carlo_samples: usize,
}

impl BudgetConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text)?;
        c.chain.validate()?;
        for (i, o) in c.observations.iter().enumerate() {
            o.validate().map_err(|e| match e {
                Error::InvalidParameter { field, reason } => {
                    Error::invalid(field.replacen("observation", &format!("observation[{i}]"), 1), reason)
                }
                other => other,
            })?;
        }
        Ok(c)
    }
}
