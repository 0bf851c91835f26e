//! Acceptance suite.
//!
//! Runs every criterion in sequence and prints one `PASS`/`FAIL` line each.
//! The binary exits non-zero when a criterion fails that is not listed in
//! [`KNOWN_DEVIATIONS`]; those are printed as `FAIL` all the same.
//!
//! Statistical criteria run the built-in presets at their full pulse counts
//! with their recorded seeds, so every number printed here is reproducible.

use std::path::Path;
use std::time::{Duration, Instant};

use qdtwin::budget::{budget_report, default_modes, lateral_coupling, CountrateObservation, EfficiencyChain, Stage};
use qdtwin::config::{preset, ExperimentConfig, PRESETS};
use qdtwin::correlator::{backsolve_g2, correct_visibility, cross_correlate, cross_correlate_par};
use qdtwin::emitter::generate_stream;
use qdtwin::fitting::decay::DecayObjective;
use qdtwin::fitting::fano::FanoObjective;
use qdtwin::fitting::lm::Objective;
use qdtwin::fitting::{
    fit_decay, fit_fano, purcell_factor, DecayData, DecayFitOptions, DecayModel, FanoFitOptions, FanoParams, FitMethod,
    Spectrum,
};
use qdtwin::pipeline::{analyze_acquisitions, analyze_dir, run_in_memory, simulate, simulate_to_dir, AnalyzeOptions, Manifest};
use qdtwin::rng::SeedTree;
use qdtwin::tags::TimeTagStream;
use qdtwin::Measured;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};

/// Criteria whose failure is understood and recorded; see the README.
const KNOWN_DEVIATIONS: &[u8] = &[3, 6];

const BUDGET_MAX_RUNTIME: Duration = Duration::from_secs(1);
const PURCELL_ERR_TOL: f64 = 0.3;
const VCORR_TOL: f64 = 0.005;
const VCORR_G2: f64 = 0.025;
const G2_80MHZ: f64 = 0.007;
const G2_80MHZ_TOL: f64 = 0.002;
const HBT_MIN_PULSES: u64 = 10_000_000;
const HBT_MAX_RUNTIME: Duration = Duration::from_secs(60);
const MIN_GENERATION_RATE: f64 = 1e6;
const G2_GHZ_RANGE: (f64, f64) = (0.024, 0.046);
const HOM_V_TOL: f64 = 0.04;
const HALF_PEAK_SIGMAS: f64 = 3.0;
const MONOTONICITY_SEEDS: u64 = 10;
const ORACLE_PAIRS: usize = 100;
const ORACLE_MAX_N: usize = 10_000;
const DECAY_EVENTS: usize = 1_000_000;
const DECAY_REL_TOL: f64 = 0.02;
const FANO_NOISE: f64 = 0.01;
const FANO_SIGMAS: f64 = 3.0;
const GRADIENT_REL_TOL: f64 = 1e-6;
const MISALIGNMENT_UM: f64 = 0.2;
const MIN_COUPLING: f64 = 0.90;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn single_thread<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("thread pool").install(f)
}

fn within(x: f64, target: f64, tol: f64) -> bool {
    (x - target).abs() <= tol
}

fn efficiency_pipeline() -> Outcome {
    let chain = EfficiencyChain::new(vec![
        Stage::new("splice", 0.95, 0.01),
        Stage::new("cryostat", 0.60, 0.05),
        Stage::new("detection", 0.049, 0.001),
    ])
    .unwrap();
    let obs = |label: &str, rate: f64| CountrateObservation {
        label: label.into(),
        rate,
        rate_uncertainty: 0.0,
        rep_rate: 80e6,
    };
    let start = Instant::now();
    let r = budget_report(&[obs("1.2 Mcps", 1.2e6), obs("0.30 Mcps", 0.30e6)], &chain, None).unwrap();
    let elapsed = start.elapsed();
    let pct: Vec<String> = r.rows.iter().map(|row| format!("{:.1}", 100.0 * row.eta_source.value)).collect();
    Outcome::new(
        pct == ["53.7", "13.4"] && elapsed < BUDGET_MAX_RUNTIME,
        format!("eta_source = {}% and {}% in {:.1?}", pct[0], pct[1], elapsed),
    )
}

fn purcell_arithmetic() -> Outcome {
    let reference = Measured::new(680.0, 111.0);
    let cases = [(55.0, 12.4, 2.2), (77.0, 8.8, 1.4)];
    let mut pass = true;
    let mut parts = Vec::new();
    for (t1, printed, printed_err) in cases {
        let f = purcell_factor(reference, Measured::new(t1, 1.0)).unwrap();
        let rounded = format!("{:.1}", f.value);
        pass &= rounded == format!("{printed:.1}") && within(f.err, printed_err, PURCELL_ERR_TOL);
        parts.push(format!("T1={t1} ps: {:.3} +- {:.3}", f.value, f.err));
    }
    Outcome::new(pass, parts.join("; "))
}

fn vcorr_identity() -> Outcome {
    let pairs = [(0.78, 0.82), (0.75, 0.79), (0.63, 0.67), (0.52, 0.55)];
    let mut worst: (f64, f64) = (0.0, 0.0);
    for &(raw, printed) in &pairs {
        let c = correct_visibility(raw, VCORR_G2).unwrap().value;
        let d = (c - printed).abs();
        if d > worst.1 {
            worst = (raw, d);
        }
    }
    let consistent = backsolve_g2(&pairs, VCORR_TOL)
        .map(|(lo, hi)| format!("g2 in [{lo:.4}, {hi:.4}] satisfies all pairs"))
        .unwrap_or_else(|| "no g2 satisfies all pairs".into());
    Outcome::new(
        worst.1 <= VCORR_TOL,
        format!("g2={VCORR_G2}: largest miss {:.4} at raw {}; {consistent}", worst.1, worst.0),
    )
}

fn g2_80mhz() -> (Outcome, f64) {
    let cfg = preset("paper-80mhz").unwrap();
    let n = cfg.excitation.n_pulses;
    let (report, total, rate) = single_thread(|| {
        let start = Instant::now();
        let stream = generate_stream(&cfg.emitter, &cfg.excitation).unwrap();
        let rate = n as f64 / start.elapsed().as_secs_f64();
        drop(stream);
        let start = Instant::now();
        let report = run_in_memory(&cfg).unwrap();
        (report, start.elapsed(), rate)
    });
    let g2 = report.g2().unwrap();
    let pass = n >= HBT_MIN_PULSES
        && within(g2.g2_zero, G2_80MHZ, G2_80MHZ_TOL)
        && total <= HBT_MAX_RUNTIME
        && rate >= MIN_GENERATION_RATE;
    let o = Outcome::new(
        pass,
        format!(
            "g2(0) = {:.5} +- {:.5} on {n} pulses; simulate+analyse {:.1?} on one thread; generation {:.2e} pulses/s",
            g2.g2_zero, g2.stat_error, total, rate
        ),
    );
    (o, g2.g2_zero)
}

fn g2_ghz(g2_80: f64) -> Outcome {
    let cfg = preset("paper-ghz").unwrap();
    let g2 = run_in_memory(&cfg).unwrap().g2().unwrap().clone();
    let pass = g2.g2_zero > g2_80 && (G2_GHZ_RANGE.0..=G2_GHZ_RANGE.1).contains(&g2.g2_zero);
    Outcome::new(pass, format!("g2(0) = {:.5} +- {:.5} at 1.28 GHz vs {g2_80:.5} at 80 MHz", g2.g2_zero, g2.stat_error))
}

fn hom_visibility(cfg: &ExperimentConfig) -> f64 {
    run_in_memory(cfg).unwrap().visibility().unwrap().visibility
}

fn hom_recovery() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, target) in [("paper-hom-12ns", 0.75), ("paper-hom-2ns", 0.78)] {
        let cfg = preset(name).unwrap();
        let acqs = simulate(&cfg).unwrap();
        let p = analyze_acquisitions(&cfg, "", &acqs).unwrap();
        let v = p.report.visibility().unwrap();
        pass &= within(v.visibility, target, HOM_V_TOL);
        parts.push(format!("{name}: V = {:.4} +- {:.4}", v.visibility, v.stat_error));
        if name == "paper-hom-12ns" {
            let orders = 2 * (cfg.analysis.side_peaks + 1 - cfg.analysis.hom_min_order);
            let side_sum = v.cross_norm * orders as f64;
            let ratio = v.cross_center as f64 / v.cross_norm;
            let sigma = ratio * (1.0 / v.cross_center as f64 + 1.0 / side_sum).sqrt();
            let z = (ratio - 0.5) / sigma;
            pass &= z.abs() <= HALF_PEAK_SIGMAS;
            parts.push(format!("cross-polarized centre / distant mean = {ratio:.4} +- {sigma:.4} ({z:+.1} sigma from 0.5)"));
        }
    }
    Outcome::new(pass, parts.join("; "))
}

fn delay_monotonicity() -> Outcome {
    let mean_v = |name: &str| {
        let base = preset(name).unwrap();
        let root = SeedTree::new(base.excitation.seed);
        let vs: Vec<f64> = (0..MONOTONICITY_SEEDS)
            .map(|i| {
                let mut c = base.clone();
                c.excitation.seed = root.child(i).key();
                hom_visibility(&c)
            })
            .collect();
        vs.iter().sum::<f64>() / vs.len() as f64
    };
    let v2 = mean_v("paper-hom-2ns");
    let v12 = mean_v("paper-hom-12ns");
    Outcome::new(v2 >= v12, format!("mean V over {MONOTONICITY_SEEDS} seeds: {v2:.4} at 2 ns, {v12:.4} at 12.5 ns"))
}

fn brute_force(a: &[u64], b: &[u64], bw: u64, lo: i64, hi: i64) -> Vec<u64> {
    let mut counts = vec![0u64; ((hi - lo) as u64 / bw) as usize];
    for &x in a {
        for &y in b {
            let d = y as i64 - x as i64;
            if d >= lo && d < hi {
                counts[((d - lo) as u64 / bw) as usize] += 1;
            }
        }
    }
    counts
}

fn random_stream(rng: &mut ChaCha8Rng, channel: u8, n: usize, span: u64) -> TimeTagStream {
    let mut tags: Vec<u64> = (0..n).map(|_| rng.random_range(0..span)).collect();
    tags.sort_unstable();
    TimeTagStream::new(channel, tags, span).unwrap()
}

fn correlator_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut mismatches = 0;
    let mut total_pairs = 0u64;
    for i in 0..ORACLE_PAIRS {
        let na = rng.random_range(0..=ORACLE_MAX_N);
        let nb = rng.random_range(0..=ORACLE_MAX_N);
        // Short spans force duplicate tags and dense overlaps.
        let span = if i % 4 == 0 { rng.random_range(1..2_000) } else { rng.random_range(1_000..5_000_000) };
        let a = random_stream(&mut rng, 0, na, span);
        let b = random_stream(&mut rng, 1, nb, span);
        let bw = rng.random_range(1..200u64);
        let bins = rng.random_range(1..400i64);
        let lo = rng.random_range(-(span as i64)..=0) - rng.random_range(0..3) * bw as i64;
        let hi = lo + bins * bw as i64;
        let oracle = brute_force(&a.tags, &b.tags, bw, lo, hi);
        total_pairs += oracle.iter().sum::<u64>();
        let serial = cross_correlate(&a, &b, bw, lo, hi).unwrap();
        let parallel = cross_correlate_par(&a, &b, bw, lo, hi).unwrap();
        if serial.counts != oracle || parallel.counts != oracle {
            mismatches += 1;
        }
    }
    Outcome::new(
        mismatches == 0,
        format!("{ORACLE_PAIRS} stream pairs, {total_pairs} coincidences, {mismatches} histograms differ from brute force"),
    )
}

fn synthetic_decay(t1: f64, seed: u64) -> DecayData {
    let bw = 4.0;
    let n_bins = ((10.0 * t1).max(2_000.0) / bw).ceil() as usize;
    let mut counts = vec![0.0; n_bins];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exp = Exp::new(1.0 / t1).unwrap();
    for _ in 0..DECAY_EVENTS {
        let k = (exp.sample(&mut rng) / bw) as usize;
        if k < n_bins {
            counts[k] += 1.0;
        }
    }
    // Flat background of dark counts, two per bin on average.
    for _ in 0..2 * n_bins {
        counts[rng.random_range(0..n_bins)] += 1.0;
    }
    let times = (0..n_bins).map(|k| k as f64 * bw).collect();
    DecayData::new(times, counts).unwrap()
}

fn synthetic_fano(truth: &FanoParams, seed: u64) -> Spectrum {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wl: Vec<f64> = (0..600).map(|i| truth.lambda_m - 3.0 + 0.01 * i as f64).collect();
    let clean: Vec<f64> = wl.iter().map(|&l| truth.eval(l)).collect();
    let scale = clean.iter().cloned().fold(0.0, f64::max);
    let noise = Normal::new(0.0, FANO_NOISE * scale).unwrap();
    let y = clean.iter().map(|&c| c + noise.sample(&mut rng)).collect();
    Spectrum::new(wl, y).unwrap()
}

/// Central difference refined by one Richardson step. `scales` sets the
/// natural size of each parameter.
fn numeric_gradient(f: &dyn Fn(&[f64]) -> f64, p: &[f64], scales: &[f64]) -> Vec<f64> {
    (0..p.len())
        .map(|i| {
            let d = |h: f64| {
                let mut up = p.to_vec();
                let mut dn = p.to_vec();
                up[i] += h;
                dn[i] -= h;
                (f(&up) - f(&dn)) / (2.0 * h)
            };
            let h = 1e-3 * scales[i];
            (4.0 * d(h / 2.0) - d(h)) / 3.0
        })
        .collect()
}

/// Largest componentwise relative difference.
fn gradient_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic.iter().zip(numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs() / a.abs()))
}

fn fit_recovery() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();

    for (t1, seed) in [(77.0, 91), (1780.0, 92)] {
        let data = synthetic_decay(t1, seed);
        let r = fit_decay(&data, &DecayFitOptions::new(DecayModel::Mono, 0.0)).unwrap();
        let rel = (r.t1_fast - t1).abs() / t1;
        pass &= rel <= DECAY_REL_TOL;
        parts.push(format!("T1 {t1} -> {:.2} +- {:.2} ps", r.t1_fast, r.t1_fast_err()));
    }

    let truth = FanoParams { lambda_m: 939.5, w_m: 0.6, q_fano: -1.0, amplitude: 40.0, background: 10.0 };
    let spec = synthetic_fano(&truth, 93);
    let r = fit_fano(&spec, &FanoFitOptions::default()).unwrap();
    let z = [
        (r.lambda_m - truth.lambda_m) / r.errors[0],
        (r.w_m - truth.w_m) / r.errors[1],
        (r.q_fano - truth.q_fano) / r.errors[2],
    ];
    pass &= z.iter().all(|z| z.abs() <= FANO_SIGMAS);
    parts.push(format!("Fano pulls (lambda, w, q) = ({:+.2}, {:+.2}, {:+.2}) sigma", z[0], z[1], z[2]));

    let mut worst = 0.0f64;
    let data = synthetic_decay(77.0, 94);
    for (model, p) in [(DecayModel::Mono, vec![9e4, 80.0, 2.5]), (DecayModel::Bi, vec![9e4, 70.0, 400.0, 0.05, 2.5])] {
        for method in [FitMethod::PoissonMle, FitMethod::LeastSquares] {
            let obj = DecayObjective { model, method, x: &data.times, y: &data.counts };
            let analytic = obj.gradient(&p).unwrap();
            let scales: Vec<f64> = p.iter().map(|v| v.abs()).collect();
            let numeric = numeric_gradient(&|q| obj.value(q).unwrap(), &p, &scales);
            worst = worst.max(gradient_error(analytic.as_slice(), &numeric));
        }
    }
    let obj = FanoObjective { spectrum: &spec, fixed_q: None };
    let p = vec![939.4, 0.65, -0.8, 35.0, 11.0];
    let analytic = obj.gradient(&p).unwrap();
    let scales = [p[1], p[1], 1.0, p[3], p[4]];
    worst = worst.max(gradient_error(analytic.as_slice(), &numeric_gradient(&|q| obj.value(q).unwrap(), &p, &scales)));
    pass &= worst <= GRADIENT_REL_TOL;
    parts.push(format!("worst gradient mismatch {worst:.1e}"));

    Outcome::new(pass, parts.join("; "))
}

fn misalignment_bound() -> Outcome {
    let (cavity, fiber) = default_modes();
    let c = lateral_coupling(&cavity, &fiber, MISALIGNMENT_UM).unwrap();
    Outcome::new(c >= MIN_COUPLING, format!("coupling {c:.4} at {MISALIGNMENT_UM} um, waist {:.4} um", fiber.waist))
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut differing = Vec::new();
    let mut files = 0;
    for (name, _) in PRESETS {
        let cfg = preset(name).unwrap();
        let runs: Vec<_> = [1, 1, 4]
            .iter()
            .enumerate()
            .map(|(i, &threads)| {
                let dir = tmp.path().join(format!("{name}-{i}"));
                rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| {
                    let (m, _) = simulate_to_dir(&cfg, &dir).unwrap();
                    analyze_dir(&dir, &dir, &AnalyzeOptions::default()).unwrap();
                    assert_eq!(m, Manifest::new(&cfg).unwrap());
                });
                let c = dir_contents(&dir);
                std::fs::remove_dir_all(&dir).unwrap();
                c
            })
            .collect();
        files += runs[0].len();
        if runs[0] != runs[1] || runs[0] != runs[2] {
            differing.push(*name);
        }
    }
    Outcome::new(
        differing.is_empty(),
        format!("{} presets x 3 runs (1, 1, 4 threads), {files} files per run set; differing: {differing:?}", PRESETS.len()),
    )
}

fn main() {
    let started = Instant::now();
    let mut results: Vec<(u8, &str, Outcome)> = Vec::new();
    let mut record = |id: u8, name: &'static str, o: Outcome| {
        println!("criterion {id:>2} {name:<28} {}  {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o));
    };

    record(1, "efficiency pipeline", efficiency_pipeline());
    record(2, "purcell arithmetic", purcell_arithmetic());
    record(3, "corrected visibility", vcorr_identity());
    let (o, g2_80) = g2_80mhz();
    record(4, "g2 recovery at 80 MHz", o);
    record(5, "g2 at 1.28 GHz", g2_ghz(g2_80));
    record(6, "HOM recovery", hom_recovery());
    record(7, "delay monotonicity", delay_monotonicity());
    record(8, "correlator oracle", correlator_oracle());
    record(9, "fit recovery", fit_recovery());
    record(10, "misalignment bound", misalignment_bound());
    record(11, "determinism", determinism());

    let unexpected: Vec<u8> =
        results.iter().filter(|(id, _, o)| !o.pass && !KNOWN_DEVIATIONS.contains(id)).map(|(id, _, _)| *id).collect();
    let passed = results.iter().filter(|(_, _, o)| o.pass).count();
    println!("acceptance: {passed}/{} criteria pass in {:.1?}", results.len(), started.elapsed());
    for (id, _, o) in &results {
        if o.pass && KNOWN_DEVIATIONS.contains(id) {
            println!("note: criterion {id} is listed as a known deviation but passed");
        }
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
