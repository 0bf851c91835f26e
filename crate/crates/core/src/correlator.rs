//! Cross-correlation of time-tag streams and peak-area analysis.
//!
//! The histogram is built with a two-pointer sweep: the lower edge of the
//! matching window in `b` only ever moves forward as `a` advances, so the cost
//! is proportional to the number of pairs actually binned. Integration windows
//! take every bin whose centre lies in `[c - w/2, c + w/2)`, so windows of one
//! period tile the histogram without double counting.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::emitter::Clock;
use crate::error::{Error, Result};
use crate::tags::{is_sorted, TimeTagStream};

/// Tags of `a` handled per parallel task. Fixed so the partition, and hence the
/// summation, never depends on the thread count.
const CHUNK: usize = 1 << 15;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrelationHistogram {
    pub bin_width: u64,
    pub tau_min: i64,
    pub tau_max: i64,
    pub counts: Vec<u64>,
    pub n_a: u64,
    pub n_b: u64,
    pub duration: u64,
}

impl CorrelationHistogram {
    pub fn n_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn bin_center(&self, k: usize) -> f64 {
        self.tau_min as f64 + (k as f64 + 0.5) * self.bin_width as f64
    }

    pub fn bin_lower(&self, k: usize) -> i64 {
        self.tau_min + k as i64 * self.bin_width as i64
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Merges groups of `factor` adjacent bins.
    pub fn rebin(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.counts.len() % factor != 0 {
            return Err(Error::Precondition(format!(
                "rebin factor {factor} does not divide {} bins",
                self.counts.len()
            )));
        }
        Ok(Self {
            bin_width: self.bin_width * factor as u64,
            counts: self.counts.chunks(factor).map(|c| c.iter().sum()).collect(),
            ..self.clone()
        })
    }

    /// Sum of counts whose bin centre falls in `[center - window/2, center + window/2)`.
    pub fn peak_area(&self, center: f64, window: f64) -> Result<u64> {
        let lo = center - window / 2.0;
        let hi = center + window / 2.0;
        if lo < self.tau_min as f64 || hi > self.tau_max as f64 {
            return Err(Error::Precondition(format!(
                "window [{lo}, {hi}) ps exceeds histogram range [{}, {}) ps",
                self.tau_min, self.tau_max
            )));
        }
        let bw = self.bin_width as f64;
        // First bin with centre >= lo, first bin with centre >= hi.
        let first = ((lo - self.tau_min as f64) / bw - 0.5).ceil().max(0.0) as usize;
        let last = (((hi - self.tau_min as f64) / bw - 0.5).ceil().max(0.0) as usize).min(self.counts.len());
        Ok(self.counts[first.min(last)..last].iter().sum())
    }

    pub fn write_csv<W: Write>(&self, mut w: W, header_comment: Option<&str>) -> Result<()> {
        if let Some(c) = header_comment {
            writeln!(w, "# {c}")?;
        }
        writeln!(w, "tau_ps,counts")?;
        for (k, c) in self.counts.iter().enumerate() {
            writeln!(w, "{},{}", self.bin_lower(k), c)?;
        }
        Ok(())
    }
}

fn check_sorted(name: &str, tags: &[u64]) -> Result<()> {
    if is_sorted(tags) {
        Ok(())
    } else {
        Err(Error::Precondition(format!("stream {name} is not sorted")))
    }
}

fn validate_range(bin_width: u64, tau_min: i64, tau_max: i64) -> Result<usize> {
    if bin_width == 0 {
        return Err(Error::invalid("analysis.bin_width", "must be positive"));
    }
    if tau_max <= tau_min {
        return Err(Error::invalid("analysis.tau_range", "tau_max must exceed tau_min"));
    }
    let span = (tau_max - tau_min) as u64;
    if span % bin_width != 0 {
        return Err(Error::invalid(
            "analysis.bin_width",
            format!("{bin_width} ps does not divide the {span} ps lag span"),
        ));
    }
    Ok((span / bin_width) as usize)
}

fn sweep(a: &[u64], b: &[u64], bin_width: u64, tau_min: i64, tau_max: i64, counts: &mut [u64]) {
    let Some(&first) = a.first() else { return };
    let bw = bin_width as i64;
    let mut start = b.partition_point(|&x| (x as i64) < first as i64 + tau_min);
    for &ta in a {
        let ta = ta as i64;
        let lo = ta + tau_min;
        while start < b.len() && (b[start] as i64) < lo {
            start += 1;
        }
        for &tb in &b[start..] {
            let d = tb as i64 - ta;
            if d >= tau_max {
                break;
            }
            counts[((d - tau_min) / bw) as usize] += 1;
        }
    }
}

/// Histogram of `b[j] - a[i]` over `[tau_min, tau_max)`; serial sweep.
pub fn cross_correlate(
    a: &TimeTagStream,
    b: &TimeTagStream,
    bin_width: u64,
    tau_min: i64,
    tau_max: i64,
) -> Result<CorrelationHistogram> {
    let n_bins = validate_range(bin_width, tau_min, tau_max)?;
    check_sorted("a", &a.tags)?;
    check_sorted("b", &b.tags)?;
    let mut counts = vec![0u64; n_bins];
    sweep(&a.tags, &b.tags, bin_width, tau_min, tau_max, &mut counts);
    Ok(histogram(a, b, bin_width, tau_min, tau_max, counts))
}

/// Same result as [`cross_correlate`], computed on the current rayon pool by
/// splitting `a` into fixed-size chunks and summing partial histograms.
pub fn cross_correlate_par(
    a: &TimeTagStream,
    b: &TimeTagStream,
    bin_width: u64,
    tau_min: i64,
    tau_max: i64,
) -> Result<CorrelationHistogram> {
    let n_bins = validate_range(bin_width, tau_min, tau_max)?;
    check_sorted("a", &a.tags)?;
    check_sorted("b", &b.tags)?;
    let counts = a
        .tags
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut c = vec![0u64; n_bins];
            sweep(chunk, &b.tags, bin_width, tau_min, tau_max, &mut c);
            c
        })
        .reduce(
            || vec![0u64; n_bins],
            |mut x, y| {
                x.iter_mut().zip(&y).for_each(|(p, q)| *p += q);
                x
            },
        );
    Ok(histogram(a, b, bin_width, tau_min, tau_max, counts))
}

fn histogram(
    a: &TimeTagStream,
    b: &TimeTagStream,
    bin_width: u64,
    tau_min: i64,
    tau_max: i64,
    counts: Vec<u64>,
) -> CorrelationHistogram {
    CorrelationHistogram {
        bin_width,
        tau_min,
        tau_max,
        counts,
        n_a: a.tags.len() as u64,
        n_b: b.tags.len() as u64,
        duration: a.duration.max(b.duration),
    }
}

/// Symmetric lag range covering `n_side_peaks` periods plus half a window,
/// rounded outwards to a whole number of bins.
pub fn symmetric_range(period: f64, n_side_peaks: usize, window: f64, bin_width: u64) -> (i64, i64) {
    let reach = n_side_peaks as f64 * period + window / 2.0;
    let bins = (reach / bin_width as f64).ceil() as i64 + 1;
    let half = bins * bin_width as i64;
    (-half, half)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakOptions {
    pub n_side_peaks: usize,
    /// Skip the `k = +-1` peaks (they sit inside the HOM interference cluster).
    pub exclude_nearest: bool,
}

impl Default for PeakOptions {
    fn default() -> Self {
        Self { n_side_peaks: 10, exclude_nearest: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct G2Result {
    pub g2_zero: f64,
    pub stat_error: f64,
    pub window_ps: f64,
    pub center_counts: u64,
    pub side_mean: f64,
    pub side_peaks_used: Vec<i64>,
}

fn side_orders(opts: &PeakOptions, min_order: usize) -> Vec<i64> {
    let lo = if opts.exclude_nearest { min_order.max(2) } else { min_order.max(1) };
    (lo..=opts.n_side_peaks)
        .flat_map(|k| [-(k as i64), k as i64])
        .collect()
}

/// `g2(0) = C_0 / mean(C_k)` with Poisson error propagation.
pub fn g2_zero(hist: &CorrelationHistogram, rep_period: f64, window: f64, opts: &PeakOptions) -> Result<G2Result> {
    if !(window > 0.0 && window <= rep_period + 1e-9) {
        return Err(Error::invalid("analysis.window", "must be positive and at most one period"));
    }
    let orders = side_orders(opts, 1);
    if orders.is_empty() {
        return Err(Error::invalid("analysis.side_peaks", "no side peaks selected"));
    }
    let c0 = hist.peak_area(0.0, window)?;
    let mut side_sum = 0u64;
    for &k in &orders {
        side_sum += hist.peak_area(k as f64 * rep_period, window)?;
    }
    if side_sum == 0 {
        return Err(Error::EmptySidePeaks);
    }
    let side_mean = side_sum as f64 / orders.len() as f64;
    let g2 = c0 as f64 / side_mean;
    // With an empty centre peak the one-count bound sets the error scale.
    let stat_error = if c0 == 0 {
        1.0 / side_mean
    } else {
        g2 * (1.0 / c0 as f64 + 1.0 / side_sum as f64).sqrt()
    };
    Ok(G2Result {
        g2_zero: g2,
        stat_error,
        window_ps: window,
        center_counts: c0,
        side_mean,
        side_peaks_used: orders,
    })
}

/// Windows used for HOM visibility extraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HomWindows {
    pub period: f64,
    pub window: f64,
    /// Side peaks with `|k| >= min_order` normalise each histogram.
    pub min_order: usize,
    pub n_side_peaks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Visibility {
    pub visibility: f64,
    pub stat_error: f64,
    pub co_center: u64,
    pub cross_center: u64,
    pub co_norm: f64,
    pub cross_norm: f64,
}

/// `V = 1 - A_co(0)/A_cross(0)` with each area normalised by its own distant
/// side-peak mean.
pub fn hom_visibility(co: &CorrelationHistogram, cross: &CorrelationHistogram, w: &HomWindows) -> Result<Visibility> {
    if co.bin_width != cross.bin_width || co.tau_min != cross.tau_min || co.tau_max != cross.tau_max {
        return Err(Error::Precondition("co- and cross-polarized histograms use different binning".into()));
    }
    let orders = side_orders(&PeakOptions { n_side_peaks: w.n_side_peaks, exclude_nearest: false }, w.min_order);
    if orders.is_empty() {
        return Err(Error::invalid("analysis.side_peaks", "no normalisation peaks selected"));
    }
    let norm = |h: &CorrelationHistogram| -> Result<(u64, f64)> {
        let mut s = 0;
        for &k in &orders {
            s += h.peak_area(k as f64 * w.period, w.window)?;
        }
        Ok((s, s as f64 / orders.len() as f64))
    };
    let (co_sum, co_norm) = norm(co)?;
    let (cross_sum, cross_norm) = norm(cross)?;
    if co_sum == 0 || cross_sum == 0 {
        return Err(Error::EmptySidePeaks);
    }
    let a_co = co.peak_area(0.0, w.window)?;
    let a_cross = cross.peak_area(0.0, w.window)?;
    if a_cross == 0 {
        return Err(Error::UndefinedVisibility("cross-polarized centre peak is empty".into()));
    }
    let ratio = (a_co as f64 / co_norm) / (a_cross as f64 / cross_norm);
    let rel = |n: u64| if n == 0 { 1.0 } else { 1.0 / n as f64 };
    let stat_error = ratio.max(1.0 / a_cross as f64)
        * (rel(a_co) + rel(a_cross) + rel(co_sum) + rel(cross_sum)).sqrt();
    Ok(Visibility {
        visibility: 1.0 - ratio,
        stat_error,
        co_center: a_co,
        cross_center: a_cross,
        co_norm,
        cross_norm,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectedVisibility {
    pub value: f64,
    pub clamped: bool,
}

/// Multi-photon correction `(1 + 2 g2(0)) V`, clamped to 1.
pub fn correct_visibility(v: f64, g2z: f64) -> Result<CorrectedVisibility> {
    if !(-1.0..=1.0).contains(&v) {
        return Err(Error::Domain(format!("visibility {v} outside [-1, 1]")));
    }
    if g2z.is_nan() || g2z < 0.0 {
        return Err(Error::Domain(format!("g2(0) {g2z} must be non-negative")));
    }
    let raw = (1.0 + 2.0 * g2z) * v;
    Ok(CorrectedVisibility { value: raw.min(1.0), clamped: raw > 1.0 })
}

/// Interval of `g2(0)` values for which every `(raw, corrected)` pair satisfies
/// `|(1 + 2 g2) raw - corrected| <= tol`. `None` if the pairs are inconsistent.
pub fn backsolve_g2(pairs: &[(f64, f64)], tol: f64) -> Option<(f64, f64)> {
    let mut lo: f64 = 0.0;
    let mut hi = f64::INFINITY;
    for &(raw, corrected) in pairs {
        if raw <= 0.0 {
            return None;
        }
        lo = lo.max(((corrected - tol) / raw - 1.0) / 2.0);
        hi = hi.min(((corrected + tol) / raw - 1.0) / 2.0);
    }
    (lo <= hi).then_some((lo, hi))
}

/// Arrival-time histogram folded onto one clock period (the TCSPC trace).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeTrace {
    pub bin_width: u64,
    pub counts: Vec<u64>,
}

impl TimeTrace {
    pub fn bin_center(&self, k: usize) -> f64 {
        (k as f64 + 0.5) * self.bin_width as f64
    }

    pub fn write_csv<W: Write>(&self, mut w: W, header_comment: Option<&str>) -> Result<()> {
        if let Some(c) = header_comment {
            writeln!(w, "# {c}")?;
        }
        writeln!(w, "time_ps,counts")?;
        for (k, c) in self.counts.iter().enumerate() {
            writeln!(w, "{},{}", k as u64 * self.bin_width, c)?;
        }
        Ok(())
    }
}

/// Folds tags onto the clock: phase = tag - (latest pulse at or before it).
pub fn time_trace(tags: &TimeTagStream, clock: &Clock, bin_width: u64) -> Result<TimeTrace> {
    if bin_width == 0 {
        return Err(Error::invalid("analysis.bin_width", "must be positive"));
    }
    let period = clock.period_floor() + 1;
    let n_bins = period.div_ceil(bin_width) as usize;
    let mut counts = vec![0u64; n_bins];
    let f = clock.rep_rate_hz() as u128;
    for &t in &tags.tags {
        let mut k = (t as u128 * f / 1_000_000_000_000u128) as u64;
        while clock.pulse_time(k) > t {
            k -= 1;
        }
        while clock.pulse_time(k + 1) <= t {
            k += 1;
        }
        let phase = t - clock.pulse_time(k);
        counts[(phase / bin_width) as usize] += 1;
    }
    Ok(TimeTrace { bin_width, counts })
}
