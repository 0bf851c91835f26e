//! `qdtwin` command-line interface.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! failure (fit non-convergence or a degenerate problem).

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use qdtwin::budget::budget_report;
use qdtwin::config::{preset, BenchConfig, BudgetConfig, ExperimentConfig};
use qdtwin::emitter::generate_stream;
use qdtwin::fitting::decay::{fit_decay, DecayData, DecayFitOptions, DecayModel, FitMethod};
use qdtwin::fitting::fano::{fit_fano, FanoFitOptions, Spectrum};
use qdtwin::fitting::q_factor;
use qdtwin::io::{read_numeric_csv, write_emission_binary};
use qdtwin::pipeline::{analyze_dir, run_in_memory, simulate_to_dir, AnalyzeOptions, Manifest};
use qdtwin::rng::SeedTree;
use qdtwin::{Error, ErrorKind};
use rayon::prelude::*;

#[derive(Parser)]
#[command(name = "qdtwin", version, about = "Simulate and analyse a pulsed single-photon source")]
struct Cli {
    /// Worker threads for correlation and independent runs.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Format of the summary printed to stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(clap::Args, Clone)]
struct ConfigSource {
    /// Experiment configuration file (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in scenario: paper-80mhz, paper-ghz, paper-hom-2ns, paper-hom-12ns.
    #[arg(long)]
    preset: Option<String>,
    /// Overrides the seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the number of clock cycles.
    #[arg(long)]
    pulses: Option<u64>,
}

impl ConfigSource {
    fn load(&self) -> qdtwin::Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(p), _) => ExperimentConfig::from_path(p)?,
            (None, Some(name)) => preset(name)?,
            (None, None) => return Err(Error::invalid("config", "pass --config PATH or --preset NAME")),
        };
        if let Some(s) = self.seed {
            cfg.excitation.seed = s;
        }
        if let Some(n) = self.pulses {
            cfg.excitation.n_pulses = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Mono,
    Bi,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Mle,
    Ls,
}

#[derive(Subcommand)]
enum Command {
    /// Generate detector time tags and a run manifest.
    Simulate {
        #[command(flatten)]
        source: ConfigSource,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the emission records of each acquisition.
        #[arg(long)]
        emissions: bool,
    },
    /// Correlate a simulated run and write a report with histograms.
    Analyze {
        /// Run directory written by `simulate`.
        #[arg(long)]
        input: PathBuf,
        /// Configuration whose analysis section replaces the recorded one.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory; defaults to the input directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Analyse tag files even if their manifest hashes disagree.
        #[arg(long)]
        allow_mismatch: bool,
    },
    /// Fit a lifetime model to a `time_ps,counts` CSV.
    FitDecay {
        #[arg(long)]
        input: PathBuf,
        /// Start of the fit range, ps, after the instrument response.
        #[arg(long)]
        t_start: f64,
        #[arg(long)]
        t_stop: Option<f64>,
        #[arg(long, value_enum, default_value_t = ModelArg::Mono)]
        model: ModelArg,
        #[arg(long, value_enum, default_value_t = MethodArg::Mle)]
        method: MethodArg,
    },
    /// Fit a Fano lineshape to a `wavelength_nm,intensity` CSV.
    FitFano {
        #[arg(long)]
        input: PathBuf,
        /// Lower edge of the fit window, nm.
        #[arg(long)]
        lo: Option<f64>,
        /// Upper edge of the fit window, nm.
        #[arg(long)]
        hi: Option<f64>,
    },
    /// Source efficiencies from countrates and a loss chain.
    Budget {
        /// Budget file with a `[chain]` section and `[[observation]]` entries.
        #[arg(long)]
        config: PathBuf,
        /// Seed of the Monte Carlo cross-check.
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Run simulate+analyse over parameter values and print long-form rows.
    Sweep {
        #[command(flatten)]
        source: ConfigSource,
        /// Parameter to vary.
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma-separated parameter values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Independent seeds per value.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepParam {
    PowerRatio,
    CoincidenceGate,
    Delay,
    DoubletSpacing,
    RepRate,
    SlowFraction,
    PMulti,
    DephasingRate,
    SdSigma,
    SdTauC,
    Window,
}

impl SweepParam {
    fn name(self) -> &'static str {
        match self {
            SweepParam::PowerRatio => "power_ratio",
            SweepParam::CoincidenceGate => "coincidence_gate",
            SweepParam::Delay => "delay",
            SweepParam::DoubletSpacing => "doublet_spacing",
            SweepParam::RepRate => "rep_rate",
            SweepParam::SlowFraction => "slow_fraction",
            SweepParam::PMulti => "p_multi",
            SweepParam::DephasingRate => "dephasing_rate",
            SweepParam::SdSigma => "sd_sigma",
            SweepParam::SdTauC => "sd_tau_c",
            SweepParam::Window => "window",
        }
    }

    fn apply(self, cfg: &mut ExperimentConfig, v: f64) -> qdtwin::Result<()> {
        let int = |field: &str| -> qdtwin::Result<u64> {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as u64)
            } else {
                Err(Error::invalid(field, format!("{v} is not a whole number")))
            }
        };
        match self {
            SweepParam::PowerRatio => cfg.excitation.power_ratio = v,
            SweepParam::CoincidenceGate | SweepParam::Delay => {
                let BenchConfig::Hom { delay, coincidence_gate } = &mut cfg.bench else {
                    return Err(Error::invalid("bench.kind", "this sweep needs the hom bench"));
                };
                match self {
                    SweepParam::Delay => *delay = int("bench.delay")?,
                    _ => *coincidence_gate = Some(int("bench.coincidence_gate")?),
                }
            }
            SweepParam::DoubletSpacing => cfg.excitation.doublet_spacing = Some(int("excitation.doublet_spacing")?),
            SweepParam::RepRate => cfg.excitation.rep_rate = int("excitation.rep_rate")?,
            SweepParam::SlowFraction => cfg.emitter.slow_fraction = v,
            SweepParam::PMulti => cfg.emitter.p_multi = v,
            SweepParam::DephasingRate => cfg.emitter.dephasing_rate = v,
            SweepParam::SdSigma => cfg.emitter.sd_sigma = v,
            SweepParam::SdTauC => cfg.emitter.sd_tau_c = v,
            SweepParam::Window => cfg.analysis.window = Some(v),
        }
        cfg.validate()
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numerical => 4,
    }
}

fn kind_name(k: ErrorKind) -> &'static str {
    match k {
        ErrorKind::Config => "config",
        ErrorKind::Data => "data",
        ErrorKind::Numerical => "numerical",
    }
}

fn emit(format: Format, json: &serde_json::Value, rows: &[(String, String)]) -> qdtwin::Result<()> {
    let mut out = io::stdout().lock();
    match format {
        Format::Json => writeln!(out, "{}", serde_json::to_string_pretty(json)?)?,
        Format::Csv => {
            writeln!(out, "key,value")?;
            for (k, v) in rows {
                writeln!(out, "{k},{v}")?;
            }
        }
    }
    Ok(())
}

fn flatten(prefix: &str, v: &serde_json::Value, rows: &mut Vec<(String, String)>) {
    match v {
        serde_json::Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, rows);
            }
        }
        serde_json::Value::Array(a) => {
            for (i, x) in a.iter().enumerate() {
                flatten(&format!("{prefix}[{i}]"), x, rows);
            }
        }
        other => rows.push((prefix.to_string(), other.to_string())),
    }
}

fn emit_value(format: Format, v: &serde_json::Value) -> qdtwin::Result<()> {
    let mut rows = Vec::new();
    flatten("", v, &mut rows);
    emit(format, v, &rows)
}

fn cmd_simulate(format: Format, source: &ConfigSource, out: Option<&Path>, emissions: bool) -> qdtwin::Result<()> {
    let cfg = source.load()?;
    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("run"));
    let (manifest, mut files) = simulate_to_dir(&cfg, &dir)?;
    if emissions {
        files.extend(write_emissions(&cfg, &dir)?);
    }
    emit_value(
        format,
        &serde_json::json!({
            "manifest_hash": manifest.hash,
            "period_ps": manifest.body.period_ps,
            "rep_rate_hz": manifest.body.rep_rate_hz,
            "files": files.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        }),
    )
}

/// Regenerates each acquisition's emission record from its seed branch.
fn write_emissions(cfg: &ExperimentConfig, dir: &Path) -> qdtwin::Result<Vec<PathBuf>> {
    let root = SeedTree::new(cfg.excitation.seed);
    let branches: Vec<(&str, SeedTree)> = match cfg.bench {
        BenchConfig::Hbt => vec![("hbt", root)],
        BenchConfig::Hom { .. } => vec![("co", root.child(1)), ("cross", root.child(2))],
    };
    let mut files = Vec::new();
    for (label, node) in branches {
        let mut exc = cfg.excitation;
        exc.seed = node.key();
        let stream = generate_stream(&cfg.emitter, &exc)?;
        let p = dir.join(format!("{label}_emission.qlt"));
        write_emission_binary(&stream.events, File::create(&p)?)?;
        files.push(p);
    }
    Ok(files)
}

fn cmd_analyze(format: Format, input: &Path, config: Option<&Path>, out: Option<&Path>, allow: bool) -> qdtwin::Result<()> {
    let analysis_config = config.map(ExperimentConfig::from_path).transpose()?;
    let opts = AnalyzeOptions { analysis_config, allow_mismatch: allow };
    let report = analyze_dir(input, out.unwrap_or(input), &opts)?;
    emit_value(format, &serde_json::to_value(&report)?)
}

fn cmd_fit_decay(format: Format, input: &Path, t_start: f64, t_stop: Option<f64>, model: ModelArg, method: MethodArg) -> qdtwin::Result<()> {
    let cols = read_numeric_csv(File::open(input)?, 2)?;
    let mut cols = cols.into_iter();
    let data = DecayData::new(cols.next().unwrap_or_default(), cols.next().unwrap_or_default())?;
    let model = match model {
        ModelArg::Mono => DecayModel::Mono,
        ModelArg::Bi => DecayModel::Bi,
    };
    let mut opts = DecayFitOptions::new(model, t_start);
    opts.t_stop = t_stop;
    opts.method = match method {
        MethodArg::Mle => FitMethod::PoissonMle,
        MethodArg::Ls => FitMethod::LeastSquares,
    };
    let r = fit_decay(&data, &opts)?;
    let mut v = serde_json::to_value(&r)?;
    v["param_names"] = serde_json::to_value(model.param_names())?;
    emit_value(format, &v)
}

fn cmd_fit_fano(format: Format, input: &Path, lo: Option<f64>, hi: Option<f64>) -> qdtwin::Result<()> {
    let cols = read_numeric_csv(File::open(input)?, 2)?;
    let mut cols = cols.into_iter();
    let mut spec = Spectrum::new(cols.next().unwrap_or_default(), cols.next().unwrap_or_default())?;
    if lo.is_some() || hi.is_some() {
        spec = spec.window(lo.unwrap_or(f64::NEG_INFINITY), hi.unwrap_or(f64::INFINITY))?;
    }
    let r = fit_fano(&spec, &FanoFitOptions::default())?;
    let q = q_factor(r.lambda_m, r.w_m, r.lambda_w_covariance())?;
    let mut v = serde_json::to_value(&r)?;
    v["q_factor"] = serde_json::to_value(q)?;
    emit_value(format, &v)
}

fn cmd_budget(format: Format, config: &Path, seed: u64) -> qdtwin::Result<()> {
    let cfg = BudgetConfig::from_toml(&std::fs::read_to_string(config)?)?;
    let mc = (cfg.monte_carlo_samples > 0).then_some((cfg.monte_carlo_samples, seed));
    let report = budget_report(&cfg.observations, &cfg.chain, mc)?;
    emit_value(format, &serde_json::to_value(&report)?)
}

fn cmd_sweep(format: Format, source: &ConfigSource, param: SweepParam, values: &[f64], seeds: u64) -> qdtwin::Result<()> {
    let base = source.load()?;
    let root = SeedTree::new(base.excitation.seed);
    let points: Vec<(f64, u64)> = values.iter().flat_map(|&v| (0..seeds).map(move |s| (v, s))).collect();
    let configs = points
        .iter()
        .map(|&(v, s)| {
            let mut c = base.clone();
            param.apply(&mut c, v)?;
            c.excitation.seed = root.child(s).key();
            Ok(c)
        })
        .collect::<qdtwin::Result<Vec<_>>>()?;
    let reports = configs
        .par_iter()
        .map(run_in_memory)
        .collect::<qdtwin::Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for ((v, s), (cfg, r)) in points.iter().zip(configs.iter().zip(&reports)) {
        for (metric, est, err) in r.metrics() {
            rows.push(serde_json::json!({
                "parameter": param.name(),
                "value": v,
                "seed_index": s,
                "seed": cfg.excitation.seed,
                "metric": metric,
                "estimate": est,
                "stat_error": err,
                "manifest_hash": Manifest::new(cfg)?.hash,
            }));
        }
    }
    let mut out = io::stdout().lock();
    match format {
        Format::Json => writeln!(out, "{}", serde_json::to_string_pretty(&rows)?)?,
        Format::Csv => {
            writeln!(out, "parameter,value,seed_index,seed,metric,estimate,stat_error")?;
            for r in &rows {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    r["parameter"].as_str().unwrap_or_default(),
                    r["value"],
                    r["seed_index"],
                    r["seed"],
                    r["metric"].as_str().unwrap_or_default(),
                    r["estimate"],
                    r["stat_error"]
                )?;
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> qdtwin::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::invalid("threads", "must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::invalid("threads", e.to_string()))?;
    }
    let f = cli.format;
    match &cli.command {
        Command::Simulate { source, out, emissions } => cmd_simulate(f, source, out.as_deref(), *emissions),
        Command::Analyze { input, config, out, allow_mismatch } => {
            cmd_analyze(f, input, config.as_deref(), out.as_deref(), *allow_mismatch)
        }
        Command::FitDecay { input, t_start, t_stop, model, method } => {
            cmd_fit_decay(f, input, *t_start, *t_stop, *model, *method)
        }
        Command::FitFano { input, lo, hi } => cmd_fit_fano(f, input, *lo, *hi),
        Command::Budget { config, seed } => cmd_budget(f, config, *seed),
        Command::Sweep { source, param, values, seeds } => cmd_sweep(f, source, *param, values, *seeds),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        // A closed stdout (for example `| head`) is not a failure of the command.
        Err(Error::Io(e)) if e.kind() == io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.kind();
            let msg = serde_json::json!({ "error": { "kind": kind_name(kind), "message": e.to_string() } });
            eprintln!("{msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
