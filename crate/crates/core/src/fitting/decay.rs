//! Lifetime fits of TCSPC histograms.
//!
//! Model over the fit range, with `x = t - t_start`:
//!
//! ```text
//! mu(x) = A [ (1 - s) exp(-x / tau_f) + s exp(-x / tau_s) ] + B
//! ```
//!
//! The mono-exponential model fixes `s = 0`. Parameters are found by
//! minimising the Poisson deviance; weighted least squares is available for
//! comparison. Covariances come from the observed information matrix.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::lm::{minimize, symmetric_inverse, LmConfig, Objective};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayModel {
    Mono,
    Bi,
}

impl DecayModel {
    pub fn n_params(self) -> usize {
        match self {
            DecayModel::Mono => 3,
            DecayModel::Bi => 5,
        }
    }

    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            DecayModel::Mono => &["amplitude", "t1_fast", "baseline"],
            DecayModel::Bi => &["amplitude", "t1_fast", "t1_slow", "slow_fraction", "baseline"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    #[default]
    PoissonMle,
    LeastSquares,
}

/// Binned arrival times: bin centres (ps) and counts.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayData {
    pub times: Vec<f64>,
    pub counts: Vec<f64>,
}

impl DecayData {
    pub fn new(times: Vec<f64>, counts: Vec<f64>) -> Result<Self> {
        if times.len() != counts.len() {
            return Err(Error::Format("times and counts differ in length".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Format("bin times must be strictly ascending".into()));
        }
        if counts.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::Format("counts must be finite and non-negative".into()));
        }
        Ok(Self { times, counts })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFitResult {
    pub model: DecayModel,
    pub method: FitMethod,
    pub t1_fast: f64,
    pub t1_slow: Option<f64>,
    pub slow_fraction: f64,
    pub amplitude: f64,
    pub baseline: f64,
    /// Parameter order as in [`DecayModel::param_names`].
    pub params: Vec<f64>,
    pub errors: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    /// Deviance (MLE) or chi-square (least squares) per degree of freedom.
    pub reduced_objective: f64,
    pub iterations: usize,
    /// Bi-exponential fit whose slow fraction collapsed to zero.
    pub effectively_mono: bool,
}

impl DecayFitResult {
    pub fn t1_fast_err(&self) -> f64 {
        self.errors[1]
    }
}

/// Model value, gradient and Hessian with respect to the parameters.
pub(crate) fn model_derivs(model: DecayModel, p: &[f64], x: f64) -> (f64, [f64; 5], [[f64; 5]; 5]) {
    let mut g = [0.0; 5];
    let mut h = [[0.0; 5]; 5];
    match model {
        DecayModel::Mono => {
            let (a, tau) = (p[0], p[1]);
            let e = (-x / tau).exp();
            let dt = x / (tau * tau);
            g[0] = e;
            g[1] = a * e * dt;
            g[2] = 1.0;
            h[0][1] = e * dt;
            h[1][1] = a * e * (dt * dt - 2.0 * x / (tau * tau * tau));
            h[1][0] = h[0][1];
            (a * e + p[2], g, h)
        }
        DecayModel::Bi => {
            let (a, tf, ts, s) = (p[0], p[1], p[2], p[3]);
            let ef = (-x / tf).exp();
            let es = (-x / ts).exp();
            let df = x / (tf * tf);
            let ds = x / (ts * ts);
            g[0] = (1.0 - s) * ef + s * es;
            g[1] = a * (1.0 - s) * ef * df;
            g[2] = a * s * es * ds;
            g[3] = a * (es - ef);
            g[4] = 1.0;
            h[0][1] = (1.0 - s) * ef * df;
            h[0][2] = s * es * ds;
            h[0][3] = es - ef;
            h[1][1] = a * (1.0 - s) * ef * (df * df - 2.0 * x / (tf * tf * tf));
            h[1][3] = -a * ef * df;
            h[2][2] = a * s * es * (ds * ds - 2.0 * x / (ts * ts * ts));
            h[2][3] = a * es * ds;
            for i in 0..5 {
                for j in 0..i {
                    h[i][j] = h[j][i];
                }
            }
            (a * g[0] + p[4], g, h)
        }
    }
}

fn feasible(model: DecayModel, p: &[f64]) -> bool {
    let finite = p.iter().all(|v| v.is_finite());
    match model {
        DecayModel::Mono => finite && p[1] > 0.0,
        DecayModel::Bi => finite && p[1] > 0.0 && p[2] > 0.0 && (0.0..=1.0).contains(&p[3]),
    }
}

/// Poisson deviance or weighted squared residuals over the fit range.
pub struct DecayObjective<'a> {
    pub model: DecayModel,
    pub method: FitMethod,
    pub x: &'a [f64],
    pub y: &'a [f64],
}

impl DecayObjective<'_> {
    fn weight(y: f64) -> f64 {
        1.0 / y.max(1.0)
    }

    /// Hessian of the objective itself (observed information up to a factor 2).
    pub fn observed_hessian(&self, p: &[f64]) -> Option<DMatrix<f64>> {
        let n = self.model.n_params();
        let mut h = DMatrix::zeros(n, n);
        for (&x, &y) in self.x.iter().zip(self.y) {
            let (mu, g, hm) = model_derivs(self.model, p, x);
            let (c1, c2) = match self.method {
                FitMethod::PoissonMle => {
                    if mu <= 0.0 {
                        return None;
                    }
                    (2.0 * y / (mu * mu), 2.0 * (1.0 - y / mu))
                }
                FitMethod::LeastSquares => {
                    let w = Self::weight(y);
                    (2.0 * w, -2.0 * w * (y - mu))
                }
            };
            for i in 0..n {
                for j in 0..n {
                    h[(i, j)] += c1 * g[i] * g[j] + c2 * hm[i][j];
                }
            }
        }
        Some(h)
    }

    pub fn gradient(&self, p: &[f64]) -> Option<DVector<f64>> {
        self.linearize(p).map(|(_, g, _)| g)
    }
}

impl Objective for DecayObjective<'_> {
    fn n_params(&self) -> usize {
        self.model.n_params()
    }

    fn value(&self, p: &[f64]) -> Option<f64> {
        if !feasible(self.model, p) {
            return None;
        }
        let mut acc = 0.0;
        for (&x, &y) in self.x.iter().zip(self.y) {
            let (mu, _, _) = model_derivs(self.model, p, x);
            match self.method {
                FitMethod::PoissonMle => {
                    if mu <= 0.0 {
                        return None;
                    }
                    acc += mu - y;
                    if y > 0.0 {
                        acc += y * (y / mu).ln();
                    }
                }
                FitMethod::LeastSquares => acc += Self::weight(y) * (y - mu).powi(2),
            }
        }
        Some(match self.method {
            FitMethod::PoissonMle => 2.0 * acc,
            FitMethod::LeastSquares => acc,
        })
    }

    fn linearize(&self, p: &[f64]) -> Option<(f64, DVector<f64>, DMatrix<f64>)> {
        let f = self.value(p)?;
        let n = self.model.n_params();
        let mut grad = DVector::zeros(n);
        let mut fisher = DMatrix::zeros(n, n);
        for (&x, &y) in self.x.iter().zip(self.y) {
            let (mu, g, _) = model_derivs(self.model, p, x);
            let (cg, cf) = match self.method {
                FitMethod::PoissonMle => (2.0 * (1.0 - y / mu), 2.0 / mu),
                FitMethod::LeastSquares => {
                    let w = Self::weight(y);
                    (-2.0 * w * (y - mu), 2.0 * w)
                }
            };
            for i in 0..n {
                grad[i] += cg * g[i];
                for j in 0..n {
                    fisher[(i, j)] += cf * g[i] * g[j];
                }
            }
        }
        Some((f, grad, fisher))
    }
}

/// Data-driven starting point.
pub fn initial_guess(model: DecayModel, x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let tail = &y[n - (n / 10).max(1)..];
    let baseline = tail.iter().sum::<f64>() / tail.len() as f64;
    let head = y[..n.min(3)].iter().cloned().fold(0.0, f64::max);
    let amp = (head - baseline).max(1.0);
    let target = baseline + amp / std::f64::consts::E;
    let tau = x
        .iter()
        .zip(y)
        .find(|(_, &v)| v <= target)
        .map(|(&t, _)| t)
        .filter(|&t| t > 0.0)
        .unwrap_or_else(|| (x[n - 1] / 3.0).max(1.0));
    match model {
        DecayModel::Mono => vec![amp, tau, baseline.max(0.0)],
        DecayModel::Bi => vec![amp, tau, 5.0 * tau, 0.1, baseline.max(0.0)],
    }
}

pub struct DecayFitOptions {
    pub model: DecayModel,
    pub method: FitMethod,
    pub t_start: f64,
    pub t_stop: Option<f64>,
    pub guess: Option<Vec<f64>>,
    pub lm: LmConfig,
}

impl DecayFitOptions {
    pub fn new(model: DecayModel, t_start: f64) -> Self {
        Self { model, method: FitMethod::PoissonMle, t_start, t_stop: None, guess: None, lm: LmConfig::default() }
    }
}

/// Fits the decay model to bins whose centre lies in `[t_start, t_stop)`.
pub fn fit_decay(data: &DecayData, opts: &DecayFitOptions) -> Result<DecayFitResult> {
    let model = opts.model;
    let (x, y): (Vec<f64>, Vec<f64>) = data
        .times
        .iter()
        .zip(&data.counts)
        .filter(|(&t, _)| t >= opts.t_start && opts.t_stop.is_none_or(|s| t < s))
        .map(|(&t, &c)| (t - opts.t_start, c))
        .unzip();

    let needed = match model {
        DecayModel::Mono => 3,
        DecayModel::Bi => 5,
    };
    let floor = {
        let tail = &y[y.len().saturating_sub((y.len() / 10).max(1))..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    };
    let above = y.iter().filter(|&&v| v > floor + 3.0 * floor.max(1.0).sqrt()).count();
    if x.len() <= needed || above < needed {
        return Err(Error::Degenerate(format!(
            "{} bins in range, {above} above baseline; the {model:?} model needs {needed}",
            x.len()
        )));
    }

    let p0 = match &opts.guess {
        Some(g) if g.len() == model.n_params() => g.clone(),
        Some(_) => return Err(Error::invalid("fit.guess", "wrong number of parameters")),
        None => initial_guess(model, &x, &y),
    };
    let obj = DecayObjective { model, method: opts.method, x: &x, y: &y };
    let report = minimize(&obj, &p0, &opts.lm)?;
    let p = report.params;

    let info = match opts.method {
        // Half the deviance Hessian is the observed information.
        FitMethod::PoissonMle => obj.observed_hessian(&p).map(|h| h * 0.5),
        FitMethod::LeastSquares => obj.linearize(&p).map(|(_, _, f)| f * 0.5),
    }
    .ok_or_else(|| Error::Degenerate("model not positive at optimum".into()))?;
    let cov = symmetric_inverse(&info)
        .ok_or_else(|| Error::Degenerate("information matrix is singular".into()))?;
    let errors: Vec<f64> = (0..p.len()).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
    let covariance = (0..p.len()).map(|i| (0..p.len()).map(|j| cov[(i, j)]).collect()).collect();
    let dof = (x.len() - p.len()) as f64;

    Ok(match model {
        DecayModel::Mono => DecayFitResult {
            model,
            method: opts.method,
            t1_fast: p[1],
            t1_slow: None,
            slow_fraction: 0.0,
            amplitude: p[0],
            baseline: p[2],
            errors,
            covariance,
            reduced_objective: report.objective / dof,
            iterations: report.iterations,
            effectively_mono: true,
            params: p,
        },
        DecayModel::Bi => {
            // Order the components so t1_fast is the shorter one.
            let mut p = p;
            let mut errors = errors;
            let mut covariance: Vec<Vec<f64>> = covariance;
            if p[2] < p[1] {
                p.swap(1, 2);
                p[3] = 1.0 - p[3];
                errors.swap(1, 2);
                covariance.swap(1, 2);
                for row in covariance.iter_mut() {
                    row.swap(1, 2);
                }
            }
            let effectively_mono = p[3] < 1e-3 || p[3] <= errors[3];
            DecayFitResult {
                model,
                method: opts.method,
                t1_fast: p[1],
                t1_slow: Some(p[2]),
                slow_fraction: p[3],
                amplitude: p[0],
                baseline: p[4],
                errors,
                covariance,
                reduced_objective: report.objective / dof,
                iterations: report.iterations,
                effectively_mono,
                params: p,
            }
        }
    })
}
