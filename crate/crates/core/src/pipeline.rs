//! End-to-end runs: simulate acquisitions, persist them with a manifest, and
//! analyse tag files into reports.
//!
//! Every artifact of a run carries the SHA-256 hash of its manifest, and the
//! analysis refuses inputs whose hashes disagree unless told otherwise.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::{hbt_split, hom_bench, HomDiagnostics};
use crate::config::{BenchConfig, ExperimentConfig};
use crate::correlator::{
    correct_visibility, cross_correlate_par, g2_zero, hom_visibility, symmetric_range, time_trace,
    CorrectedVisibility, CorrelationHistogram, G2Result, HomWindows, PeakOptions, Visibility,
};
use crate::emitter::{generate_stream, Clock};
use crate::error::{Error, Result};
use crate::io::{read_tags_path, write_tags_binary, TagFile};
use crate::rng::{SeedTree, Stream};
use crate::tags::TimeTagStream;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.json";
const CO_LABEL: u64 = 1;
const CROSS_LABEL: u64 = 2;

/// Everything needed to regenerate a run bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestBody {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub rep_rate_hz: u64,
    /// Whole picoseconds per clock period.
    pub period_ps: u64,
    pub period_exact_ps: f64,
    pub acquisitions: Vec<String>,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(flatten)]
    pub body: ManifestBody,
    /// Hex SHA-256 of the body serialised as compact JSON.
    pub hash: String,
}

impl Manifest {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let clock = cfg.excitation.validate()?;
        let body = ManifestBody {
            tool: "qdtwin".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: cfg.excitation.seed,
            rep_rate_hz: clock.rep_rate_hz(),
            period_ps: clock.period_floor(),
            period_exact_ps: clock.period_exact(),
            acquisitions: acquisition_labels(&cfg.bench).iter().map(|s| s.to_string()).collect(),
            config: cfg.clone(),
        };
        let hash = hex::encode(hash_body(&body)?);
        Ok(Self { body, hash })
    }

    pub fn hash_bytes(&self) -> Result<[u8; 32]> {
        let v = hex::decode(&self.hash).map_err(|e| Error::Format(format!("manifest hash: {e}")))?;
        v.try_into().map_err(|_| Error::Format("manifest hash must be 32 bytes".into()))
    }

    /// Recomputes the hash and compares it with the stored one.
    pub fn verify(&self) -> Result<()> {
        let h = hex::encode(hash_body(&self.body)?);
        if h != self.hash {
            return Err(Error::ManifestMismatch("manifest content does not match its hash".into()));
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let m: Manifest = serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?;
        Ok(m)
    }
}

fn hash_body(body: &ManifestBody) -> Result<[u8; 32]> {
    let bytes = serde_json::to_vec(body)?;
    Ok(Sha256::digest(&bytes).into())
}

fn acquisition_labels(bench: &BenchConfig) -> &'static [&'static str] {
    match bench {
        BenchConfig::Hbt => &["hbt"],
        BenchConfig::Hom { .. } => &["co", "cross"],
    }
}

/// Detector output of one acquisition.
#[derive(Debug, Clone, PartialEq)]
pub struct Acquisition {
    pub label: String,
    pub a: TimeTagStream,
    pub b: TimeTagStream,
    pub hom: Option<HomDiagnostics>,
}

fn simulate_one(cfg: &ExperimentConfig, label: &str) -> Result<Acquisition> {
    let root = SeedTree::new(cfg.excitation.seed);
    let (node, hom) = match label {
        "hbt" => (root, None),
        "co" => (root.child(CO_LABEL), cfg.bench.hom(true)),
        "cross" => (root.child(CROSS_LABEL), cfg.bench.hom(false)),
        _ => unreachable!("labels come from acquisition_labels"),
    };
    let mut exc = cfg.excitation;
    exc.seed = node.key();
    let stream = generate_stream(&cfg.emitter, &exc)?;
    let mut rng = node.rng(Stream::Bench);
    let (det_a, det_b) = (&cfg.detectors.a, &cfg.detectors.b);
    Ok(match hom {
        None => {
            let (a, b) = hbt_split(&stream, det_a, det_b, &mut rng);
            Acquisition { label: label.into(), a, b, hom: None }
        }
        Some(h) => {
            let out = hom_bench(&stream, &h, &cfg.emitter.at_power(exc.power_ratio), det_a, det_b, &mut rng);
            Acquisition { label: label.into(), a: out.a, b: out.b, hom: Some(out.diagnostics) }
        }
    })
}

/// Runs every acquisition the bench calls for. Acquisitions own disjoint
/// seed branches, so running them concurrently does not change the output.
pub fn simulate(cfg: &ExperimentConfig) -> Result<Vec<Acquisition>> {
    cfg.validate()?;
    match acquisition_labels(&cfg.bench) {
        [one] => Ok(vec![simulate_one(cfg, one)?]),
        [x, y] => {
            let (a, b) = rayon::join(|| simulate_one(cfg, x), || simulate_one(cfg, y));
            Ok(vec![a?, b?])
        }
        _ => unreachable!(),
    }
}

fn tag_path(dir: &Path, label: &str, ch: char) -> PathBuf {
    dir.join(format!("{label}_{ch}.qtt"))
}

/// Writes the manifest and one tag file per detector channel.
pub fn write_run(dir: &Path, manifest: &Manifest, acqs: &[Acquisition]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let hash = manifest.hash_bytes()?;
    let mut written = Vec::new();
    for acq in acqs {
        for (ch, s) in [('a', &acq.a), ('b', &acq.b)] {
            let p = tag_path(dir, &acq.label, ch);
            write_tags_binary(&[s], &hash, File::create(&p)?)?;
            written.push(p);
        }
    }
    let mp = dir.join(MANIFEST_FILE);
    let mut w = BufWriter::new(File::create(&mp)?);
    serde_json::to_writer_pretty(&mut w, manifest)?;
    writeln!(w)?;
    w.flush()?;
    written.push(mp);
    Ok(written)
}

pub fn simulate_to_dir(cfg: &ExperimentConfig, dir: &Path) -> Result<(Manifest, Vec<PathBuf>)> {
    let manifest = Manifest::new(cfg)?;
    let acqs = simulate(cfg)?;
    let files = write_run(dir, &manifest, &acqs)?;
    Ok((manifest, files))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSummary {
    pub label: String,
    pub clicks_a: u64,
    pub clicks_b: u64,
    pub duration_ps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Measurement {
    Hbt {
        g2: G2Result,
    },
    Hom {
        visibility: Visibility,
        #[serde(skip_serializing_if = "Option::is_none")]
        corrected: Option<CorrectedVisibility>,
        correction_g2: Option<f64>,
        diagnostics: Vec<HomDiagnostics>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub manifest_hash: String,
    pub name: String,
    pub period_ps: f64,
    pub window_ps: f64,
    pub bin_width_ps: u64,
    pub channels: Vec<ChannelSummary>,
    pub measurement: Measurement,
}

impl AnalysisReport {
    pub fn g2(&self) -> Option<&G2Result> {
        match &self.measurement {
            Measurement::Hbt { g2 } => Some(g2),
            Measurement::Hom { .. } => None,
        }
    }

    pub fn visibility(&self) -> Option<&Visibility> {
        match &self.measurement {
            Measurement::Hom { visibility, .. } => Some(visibility),
            Measurement::Hbt { .. } => None,
        }
    }

    /// Flat `(metric, estimate, stat_error)` rows.
    pub fn metrics(&self) -> Vec<(&'static str, f64, f64)> {
        match &self.measurement {
            Measurement::Hbt { g2 } => vec![("g2_zero", g2.g2_zero, g2.stat_error)],
            Measurement::Hom { visibility, corrected, correction_g2, .. } => {
                let mut v = vec![("visibility", visibility.visibility, visibility.stat_error)];
                if let (Some(c), Some(g)) = (corrected, correction_g2) {
                    v.push(("visibility_corrected", c.value, visibility.stat_error * (1.0 + 2.0 * g)));
                }
                v
            }
        }
    }
}

/// Histograms and trace produced alongside a report.
#[derive(Debug, Clone)]
pub struct AnalysisProducts {
    pub report: AnalysisReport,
    pub histograms: Vec<(String, CorrelationHistogram)>,
    pub traces: Vec<(String, crate::correlator::TimeTrace)>,
}

/// Correlates the acquisitions of one run.
pub fn analyze_acquisitions(cfg: &ExperimentConfig, manifest_hash: &str, acqs: &[Acquisition]) -> Result<AnalysisProducts> {
    cfg.validate()?;
    let clock = Clock::new(cfg.excitation.rep_rate)?;
    let an = &cfg.analysis;
    let period = clock.period_exact();
    let window = cfg.window();
    for acq in acqs {
        if acq.a.is_empty() || acq.b.is_empty() {
            return Err(Error::Precondition(format!("acquisition `{}` has an empty channel", acq.label)));
        }
    }
    let (tau_min, tau_max) = symmetric_range(period, an.side_peaks, window, an.bin_width);
    let hists = acqs
        .iter()
        .map(|acq| Ok((acq.label.clone(), cross_correlate_par(&acq.a, &acq.b, an.bin_width, tau_min, tau_max)?)))
        .collect::<Result<Vec<_>>>()?;
    let traces = acqs
        .iter()
        .map(|acq| Ok((format!("{}_a", acq.label), time_trace(&acq.a, &clock, an.trace_bin_width)?)))
        .collect::<Result<Vec<_>>>()?;
    let channels = acqs
        .iter()
        .map(|acq| ChannelSummary {
            label: acq.label.clone(),
            clicks_a: acq.a.len() as u64,
            clicks_b: acq.b.len() as u64,
            duration_ps: acq.a.duration.max(acq.b.duration),
        })
        .collect();

    let measurement = match cfg.bench {
        BenchConfig::Hbt => Measurement::Hbt {
            g2: g2_zero(&hists[0].1, period, window, &PeakOptions { n_side_peaks: an.side_peaks, exclude_nearest: false })?,
        },
        BenchConfig::Hom { .. } => {
            let w = HomWindows { period, window, min_order: an.hom_min_order, n_side_peaks: an.side_peaks };
            let visibility = hom_visibility(&hists[0].1, &hists[1].1, &w)?;
            let corrected = an
                .correction_g2
                .map(|g| correct_visibility(visibility.visibility.clamp(-1.0, 1.0), g))
                .transpose()?;
            Measurement::Hom {
                visibility,
                corrected,
                correction_g2: an.correction_g2,
                diagnostics: acqs.iter().filter_map(|a| a.hom).collect(),
            }
        }
    };
    Ok(AnalysisProducts {
        report: AnalysisReport {
            manifest_hash: manifest_hash.to_string(),
            name: cfg.name.clone(),
            period_ps: period,
            window_ps: window,
            bin_width_ps: an.bin_width,
            channels,
            measurement,
        },
        histograms: hists,
        traces,
    })
}

/// Simulates and analyses without touching the filesystem.
pub fn run_in_memory(cfg: &ExperimentConfig) -> Result<AnalysisReport> {
    let manifest = Manifest::new(cfg)?;
    let acqs = simulate(cfg)?;
    Ok(analyze_acquisitions(cfg, &manifest.hash, &acqs)?.report)
}

#[derive(Debug, Clone, Default)]
pub struct AnalyzeOptions {
    /// Replaces the analysis section of the recorded configuration.
    pub analysis_config: Option<ExperimentConfig>,
    /// Accept tag files whose manifest hash differs from the run manifest.
    pub allow_mismatch: bool,
}

fn load_acquisition(dir: &Path, label: &str, expected: &[u8; 32], allow_mismatch: bool) -> Result<Acquisition> {
    let mut streams = Vec::with_capacity(2);
    for ch in ['a', 'b'] {
        let p = tag_path(dir, label, ch);
        let f: TagFile = read_tags_path(&p)?;
        if &f.manifest_hash != expected && !allow_mismatch {
            return Err(Error::ManifestMismatch(format!(
                "{} was written by run {}, manifest is {}",
                p.display(),
                hex::encode(f.manifest_hash),
                hex::encode(expected)
            )));
        }
        if f.streams.len() > 1 {
            return Err(Error::Format(format!("{} holds more than one channel", p.display())));
        }
        let s = f.streams.into_iter().next().unwrap_or(TimeTagStream {
            channel: if ch == 'a' { 0 } else { 1 },
            tags: Vec::new(),
            duration: f.duration,
        });
        if s.is_empty() {
            return Err(Error::Precondition(format!("{} contains no time tags", p.display())));
        }
        streams.push(s);
    }
    let b = streams.pop().expect("two streams");
    let a = streams.pop().expect("two streams");
    Ok(Acquisition { label: label.into(), a, b, hom: None })
}

/// Reads a run directory, analyses it and writes the report, histogram CSVs
/// and arrival-time traces next to the inputs (or into `out`).
pub fn analyze_dir(dir: &Path, out: &Path, opts: &AnalyzeOptions) -> Result<AnalysisReport> {
    let manifest = Manifest::read(&dir.join(MANIFEST_FILE))?;
    if !opts.allow_mismatch {
        manifest.verify()?;
    }
    let mut cfg = manifest.body.config.clone();
    if let Some(other) = &opts.analysis_config {
        let same_run = ExperimentConfig { analysis: cfg.analysis, output: cfg.output.clone(), name: cfg.name.clone(), ..other.clone() };
        if same_run != cfg && !opts.allow_mismatch {
            return Err(Error::ManifestMismatch(
                "the given configuration describes a different simulation than the manifest".into(),
            ));
        }
        cfg.analysis = other.analysis;
    }
    let expected = manifest.hash_bytes()?;
    let acqs = acquisition_labels(&cfg.bench)
        .iter()
        .map(|l| load_acquisition(dir, l, &expected, opts.allow_mismatch))
        .collect::<Result<Vec<_>>>()?;
    let products = analyze_acquisitions(&cfg, &manifest.hash, &acqs)?;
    write_products(out, &products)?;
    Ok(products.report)
}

pub fn write_products(out: &Path, p: &AnalysisProducts) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let note = format!("manifest {}", p.report.manifest_hash);
    for (label, h) in &p.histograms {
        let f = File::create(out.join(format!("histogram_{label}.csv")))?;
        h.write_csv(BufWriter::new(f), Some(&note))?;
    }
    for (label, t) in &p.traces {
        let f = File::create(out.join(format!("trace_{label}.csv")))?;
        t.write_csv(BufWriter::new(f), Some(&note))?;
    }
    let mut w = BufWriter::new(File::create(out.join(REPORT_FILE))?);
    serde_json::to_writer_pretty(&mut w, &p.report)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}
