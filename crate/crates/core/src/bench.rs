//! Optical benches: Hanbury-Brown-Twiss splitter and an unbalanced
//! Mach-Zehnder Hong-Ou-Mandel interferometer, followed by imperfect
//! single-photon detectors.
//!
//! Interference is modelled per photon pair rather than per field amplitude:
//! two photons meeting at the output splitter within the coincidence gate
//! leave through the same port with probability equal to their wavepacket
//! overlap, and are otherwise routed independently. That reproduces the
//! coincidence statistics the correlator consumes.

use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::emitter::{pair_overlap, EmissionStream, EmitterParams};
use crate::error::{Error, Result};
use crate::tags::TimeTagStream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorParams {
    pub efficiency: f64,
    /// Gaussian timing jitter, ps (standard deviation).
    pub jitter_sigma: f64,
    /// Minimum separation of two clicks on this channel, ps.
    pub dead_time: u64,
    /// Poisson dark-count rate, Hz.
    pub dark_rate: f64,
}

impl DetectorParams {
    pub fn ideal() -> Self {
        Self { efficiency: 1.0, jitter_sigma: 0.0, dead_time: 0, dark_rate: 0.0 }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        if !(0.0..=1.0).contains(&self.efficiency) {
            return Err(Error::invalid(format!("{field}.efficiency"), "must lie in [0, 1]"));
        }
        if !(self.jitter_sigma.is_finite() && self.jitter_sigma >= 0.0) {
            return Err(Error::invalid(format!("{field}.jitter_sigma"), "must be non-negative"));
        }
        if !(self.dark_rate.is_finite() && self.dark_rate >= 0.0) {
            return Err(Error::invalid(format!("{field}.dark_rate"), "must be non-negative"));
        }
        Ok(())
    }
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self { efficiency: 0.85, jitter_sigma: 20.0, dead_time: 100, dark_rate: 100.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HomConfig {
    /// Arm imbalance of the interferometer, ps.
    pub delay: u64,
    pub copolarized: bool,
    /// Maximum arrival-time difference for two photons to interfere, ps.
    /// Defaults to five fast lifetimes.
    #[serde(default)]
    pub coincidence_gate: Option<u64>,
}

impl HomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delay == 0 {
            return Err(Error::invalid("bench.delay", "must be positive"));
        }
        Ok(())
    }

    pub fn gate(&self, params: &EmitterParams) -> u64 {
        self.coincidence_gate
            .unwrap_or_else(|| (5.0 * params.t1_fast).round() as u64)
    }
}

/// A photon after the optics and before the detectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoutedPhoton {
    pub channel: u8,
    pub time: u64,
    /// Index of the originating event in the emission stream.
    pub source: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct HomDiagnostics {
    pub photons: usize,
    pub interfering_pairs: usize,
    pub bunched_pairs: usize,
    /// Photons that fell inside the gate of an already formed pair.
    pub unresolved_triples: usize,
    pub mean_overlap: f64,
}

/// Fair 50:50 splitter.
pub fn hbt_route<R: Rng + ?Sized>(stream: &EmissionStream, rng: &mut R) -> Vec<RoutedPhoton> {
    stream
        .events
        .iter()
        .enumerate()
        .map(|(i, e)| RoutedPhoton {
            channel: u8::from(rng.random::<bool>()),
            time: e.time,
            source: i,
        })
        .collect()
}

/// Unbalanced Mach-Zehnder with pairwise interference at the output splitter.
pub fn hom_route<R: Rng + ?Sized>(
    stream: &EmissionStream,
    cfg: &HomConfig,
    params: &EmitterParams,
    rng: &mut R,
) -> (Vec<RoutedPhoton>, HomDiagnostics) {
    let gate = cfg.gate(params);
    let mut arrivals: Vec<(u64, usize)> = stream
        .events
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let long = rng.random::<bool>();
            (e.time + if long { cfg.delay } else { 0 }, i)
        })
        .collect();
    arrivals.sort_by_key(|&(t, _)| t);

    let mut out = Vec::with_capacity(arrivals.len());
    let mut diag = HomDiagnostics { photons: arrivals.len(), ..Default::default() };
    let mut overlap_sum = 0.0;
    let mut i = 0;
    while i < arrivals.len() {
        let (t0, s0) = arrivals[i];
        let pair = arrivals.get(i + 1).filter(|&&(t1, _)| t1 - t0 <= gate).copied();
        // Every photon consumes the same draws whatever the polarization, so
        // co- and cross-polarized runs with zero overlap coincide exactly.
        let port0 = u8::from(rng.random::<bool>());
        match pair {
            Some((t1, s1)) => {
                let port1 = u8::from(rng.random::<bool>());
                let u_bunch: f64 = rng.random();
                let bunch_port = u8::from(rng.random::<bool>());
                let m = pair_overlap(&stream.events[s0], &stream.events[s1], params);
                overlap_sum += m;
                diag.interfering_pairs += 1;
                let (c0, c1) = if cfg.copolarized && u_bunch < m {
                    diag.bunched_pairs += 1;
                    (bunch_port, bunch_port)
                } else {
                    (port0, port1)
                };
                out.push(RoutedPhoton { channel: c0, time: t0, source: s0 });
                out.push(RoutedPhoton { channel: c1, time: t1, source: s1 });
                if let Some(&(t2, _)) = arrivals.get(i + 2) {
                    if t2 - t1 <= gate {
                        diag.unresolved_triples += 1;
                    }
                }
                i += 2;
            }
            None => {
                out.push(RoutedPhoton { channel: port0, time: t0, source: s0 });
                i += 1;
            }
        }
    }
    if diag.interfering_pairs > 0 {
        diag.mean_overlap = overlap_sum / diag.interfering_pairs as f64;
    }
    (out, diag)
}

/// Applies efficiency, jitter, dark counts and dead time to one channel.
///
/// Dark counts are added before the dead-time filter so that the filter
/// constrains every click the channel reports.
pub fn detect<R: Rng + ?Sized>(
    photon_times: impl IntoIterator<Item = u64>,
    det: &DetectorParams,
    channel: u8,
    duration: u64,
    rng: &mut R,
) -> TimeTagStream {
    let mut clicks: Vec<u64> = Vec::new();
    for t in photon_times {
        if rng.random::<f64>() >= det.efficiency {
            continue;
        }
        let t = if det.jitter_sigma > 0.0 {
            let z: f64 = rng.sample(StandardNormal);
            (t as f64 + (det.jitter_sigma * z).round()).max(0.0) as u64
        } else {
            t
        };
        clicks.push(t);
    }

    if det.dark_rate > 0.0 {
        let mean_gap_ps = 1e12 / det.dark_rate;
        let mut t = 0.0;
        loop {
            let gap: f64 = rng.sample(Exp1);
            t += gap * mean_gap_ps;
            if t >= duration as f64 {
                break;
            }
            clicks.push(t as u64);
        }
    }

    clicks.sort_unstable();
    let min_gap = det.dead_time.max(1);
    let mut tags = Vec::with_capacity(clicks.len());
    let mut last: Option<u64> = None;
    for t in clicks {
        if last.is_none_or(|l| t - l >= min_gap) {
            tags.push(t);
            last = Some(t);
        }
    }
    let duration = duration.max(tags.last().map_or(0, |&t| t + 1));
    TimeTagStream { channel, tags, duration }
}

fn detect_pair<R: Rng + ?Sized>(
    routed: &[RoutedPhoton],
    det_a: &DetectorParams,
    det_b: &DetectorParams,
    duration: u64,
    rng: &mut R,
) -> (TimeTagStream, TimeTagStream) {
    let times = |ch: u8| routed.iter().filter(move |p| p.channel == ch).map(|p| p.time);
    let a = detect(times(0), det_a, 0, duration, rng);
    let b = detect(times(1), det_b, 1, duration, rng);
    let duration = a.duration.max(b.duration);
    (
        TimeTagStream { duration, ..a },
        TimeTagStream { duration, ..b },
    )
}

/// Hanbury-Brown-Twiss configuration: splitter plus two detectors.
pub fn hbt_split<R: Rng + ?Sized>(
    stream: &EmissionStream,
    det_a: &DetectorParams,
    det_b: &DetectorParams,
    rng: &mut R,
) -> (TimeTagStream, TimeTagStream) {
    let routed = hbt_route(stream, rng);
    detect_pair(&routed, det_a, det_b, stream.duration, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HomOutput {
    pub a: TimeTagStream,
    pub b: TimeTagStream,
    pub diagnostics: HomDiagnostics,
}

/// Hong-Ou-Mandel configuration: interferometer plus two detectors.
pub fn hom_bench<R: Rng + ?Sized>(
    stream: &EmissionStream,
    cfg: &HomConfig,
    params: &EmitterParams,
    det_a: &DetectorParams,
    det_b: &DetectorParams,
    rng: &mut R,
) -> HomOutput {
    let (routed, diagnostics) = hom_route(stream, cfg, params, rng);
    let duration = stream.duration + cfg.delay;
    let (a, b) = detect_pair(&routed, det_a, det_b, duration, rng);
    HomOutput { a, b, diagnostics }
}
