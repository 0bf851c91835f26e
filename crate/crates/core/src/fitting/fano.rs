//! Fano lineshape fits of cavity reflection dips.
//!
//! ```text
//! R(lambda) = A (q + eps)^2 / (1 + eps^2) + B,   eps = 2 (lambda - lambda_m) / w_m
//! ```
//!
//! `q = 0` is a symmetric Lorentzian dip of depth `A`, large `|q|` tends to a
//! Lorentzian peak of height `A q^2`. Parameters are found by unweighted least
//! squares and the covariance is `s^2 (J^T J)^-1` with `s^2` the residual
//! variance.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::lm::{minimize, symmetric_inverse, LmConfig, Objective};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub wavelengths: Vec<f64>,
    pub intensities: Vec<f64>,
}

impl Spectrum {
    pub fn new(wavelengths: Vec<f64>, intensities: Vec<f64>) -> Result<Self> {
        if wavelengths.len() != intensities.len() {
            return Err(Error::Format("wavelengths and intensities differ in length".into()));
        }
        if wavelengths.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Format("wavelengths must be strictly ascending".into()));
        }
        if wavelengths.iter().chain(&intensities).any(|v| !v.is_finite()) {
            return Err(Error::Format("spectrum contains non-finite values".into()));
        }
        Ok(Self { wavelengths, intensities })
    }

    pub fn len(&self) -> usize {
        self.wavelengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.wavelengths.is_empty()
    }

    /// Sub-spectrum with wavelengths in `[lo, hi]`.
    pub fn window(&self, lo: f64, hi: f64) -> Result<Spectrum> {
        let (w, i) = self
            .wavelengths
            .iter()
            .zip(&self.intensities)
            .filter(|(&l, _)| l >= lo && l <= hi)
            .map(|(&l, &v)| (l, v))
            .unzip();
        Spectrum::new(w, i)
    }
}

/// Parameter vector order: `[lambda_m, w_m, q, amplitude, background]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FanoParams {
    pub lambda_m: f64,
    pub w_m: f64,
    pub q_fano: f64,
    pub amplitude: f64,
    pub background: f64,
}

impl FanoParams {
    pub fn to_vec(self) -> Vec<f64> {
        vec![self.lambda_m, self.w_m, self.q_fano, self.amplitude, self.background]
    }

    pub fn from_slice(p: &[f64]) -> Self {
        Self { lambda_m: p[0], w_m: p[1], q_fano: p[2], amplitude: p[3], background: p[4] }
    }

    pub fn eval(&self, lambda: f64) -> f64 {
        fano_derivs(&self.to_vec(), lambda).0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FanoFitResult {
    pub lambda_m: f64,
    pub w_m: f64,
    pub q_fano: f64,
    pub amplitude: f64,
    pub background: f64,
    /// One-sigma errors in the order `[lambda_m, w_m, q, amplitude, background]`.
    pub errors: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub residual_variance: f64,
    pub iterations: usize,
}

impl FanoFitResult {
    pub fn params(&self) -> FanoParams {
        FanoParams {
            lambda_m: self.lambda_m,
            w_m: self.w_m,
            q_fano: self.q_fano,
            amplitude: self.amplitude,
            background: self.background,
        }
    }

    /// The 2x2 covariance block of `(lambda_m, w_m)`.
    pub fn lambda_w_covariance(&self) -> [[f64; 2]; 2] {
        let c = &self.covariance;
        [[c[0][0], c[0][1]], [c[1][0], c[1][1]]]
    }
}

/// Model value and gradient with respect to `[lambda_m, w_m, q, A, B]`.
pub(crate) fn fano_derivs(p: &[f64], lambda: f64) -> (f64, [f64; 5]) {
    let (lm, w, q, a, b) = (p[0], p[1], p[2], p[3], p[4]);
    let eps = 2.0 * (lambda - lm) / w;
    let den = 1.0 + eps * eps;
    let shape = (q + eps).powi(2) / den;
    let d_eps = 2.0 * (q + eps) * (1.0 - q * eps) / (den * den);
    let g = [
        a * d_eps * (-2.0 / w),
        a * d_eps * (-eps / w),
        a * 2.0 * (q + eps) / den,
        shape,
        1.0,
    ];
    (a * shape + b, g)
}

/// Least-squares objective. With `fixed_q` set, the parameter vector is
/// `[lambda_m, w_m, amplitude, background]` and `q` is held constant.
pub struct FanoObjective<'a> {
    pub spectrum: &'a Spectrum,
    pub fixed_q: Option<f64>,
}

impl FanoObjective<'_> {
    fn full(&self, p: &[f64]) -> [f64; 5] {
        match self.fixed_q {
            Some(q) => [p[0], p[1], q, p[2], p[3]],
            None => [p[0], p[1], p[2], p[3], p[4]],
        }
    }

    fn free_columns(&self) -> &'static [usize] {
        match self.fixed_q {
            Some(_) => &[0, 1, 3, 4],
            None => &[0, 1, 2, 3, 4],
        }
    }

    fn jacobian(&self, p: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let full = self.full(p);
        let cols = self.free_columns();
        let n = self.spectrum.len();
        let mut r = DVector::zeros(n);
        let mut j = DMatrix::zeros(n, cols.len());
        for (k, (&l, &y)) in self.spectrum.wavelengths.iter().zip(&self.spectrum.intensities).enumerate() {
            let (m, g) = fano_derivs(&full, l);
            r[k] = m - y;
            for (c, &i) in cols.iter().enumerate() {
                j[(k, c)] = g[i];
            }
        }
        (r, j)
    }

    pub fn gradient(&self, p: &[f64]) -> Option<DVector<f64>> {
        self.linearize(p).map(|(_, g, _)| g)
    }
}

impl Objective for FanoObjective<'_> {
    fn n_params(&self) -> usize {
        self.free_columns().len()
    }

    fn value(&self, p: &[f64]) -> Option<f64> {
        if !(p.iter().all(|v| v.is_finite()) && p[1] > 0.0) {
            return None;
        }
        let full = self.full(p);
        Some(
            self.spectrum
                .wavelengths
                .iter()
                .zip(&self.spectrum.intensities)
                .map(|(&l, &y)| (fano_derivs(&full, l).0 - y).powi(2))
                .sum(),
        )
    }

    fn linearize(&self, p: &[f64]) -> Option<(f64, DVector<f64>, DMatrix<f64>)> {
        let f = self.value(p)?;
        let (r, j) = self.jacobian(p);
        let jt = j.transpose();
        Some((f, 2.0 * &jt * r, 2.0 * &jt * j))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FanoFitOptions {
    pub guess: Option<FanoParams>,
    /// Holds the asymmetry parameter at this value.
    pub fixed_q: Option<f64>,
    pub lm: LmConfig,
}

/// Starting point from the dip position, its full width at half depth and
/// the sign of the shoulder asymmetry.
pub fn initial_guess(spec: &Spectrum) -> Result<FanoParams> {
    let y = &spec.intensities;
    let l = &spec.wavelengths;
    let n = y.len();
    if n < 6 {
        return Err(Error::Degenerate(format!("{n} spectral points cannot constrain a Fano fit")));
    }
    let (imin, &ymin) = y
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty");
    let edge = (n / 10).max(1);
    let left = y[..edge].iter().sum::<f64>() / edge as f64;
    let right = y[n - edge..].iter().sum::<f64>() / edge as f64;
    let baseline = 0.5 * (left + right);
    let depth = baseline - ymin;
    let spread = y.iter().cloned().fold(f64::MIN, f64::max) - ymin;
    if !(spread > 0.0) || depth <= 1e-9 * baseline.abs().max(1.0) {
        return Err(Error::Degenerate("spectrum shows no dip".into()));
    }
    let half = ymin + 0.5 * depth;
    let lo = (0..imin).rev().find(|&i| y[i] >= half).map_or(l[0], |i| l[i]);
    let hi = (imin..n).find(|&i| y[i] >= half).map_or(l[n - 1], |i| l[i]);
    let w = (hi - lo).max(l[1] - l[0]);
    // A peak on the red side of the dip means q > 0 in this parameterisation.
    let q = if right > left { 0.3 } else if right < left { -0.3 } else { 0.0 };
    Ok(FanoParams {
        lambda_m: l[imin],
        w_m: w,
        q_fano: q,
        amplitude: depth,
        background: ymin,
    })
}

pub fn fit_fano(spec: &Spectrum, opts: &FanoFitOptions) -> Result<FanoFitResult> {
    let mut g = match opts.guess {
        Some(g) => g,
        None => initial_guess(spec)?,
    };
    let obj = FanoObjective { spectrum: spec, fixed_q: opts.fixed_q };
    let np = obj.n_params();
    if spec.len() <= np {
        return Err(Error::Degenerate("too few spectral points for the Fano parameters".into()));
    }
    if let Some(q) = opts.fixed_q {
        g.q_fano = q;
    }
    let cols = obj.free_columns();
    let p0: Vec<f64> = cols.iter().map(|&i| g.to_vec()[i]).collect();
    let report = minimize(&obj, &p0, &opts.lm)?;
    let p = obj.full(&report.params);
    let (_, j) = obj.jacobian(&report.params);
    let s2 = report.objective / (spec.len() - np) as f64;
    let jtj = j.transpose() * &j;
    let free_cov = symmetric_inverse(&jtj)
        .ok_or_else(|| Error::Degenerate("Fano parameters are not identifiable".into()))?
        * s2;
    if !(p[1] > 0.0) || p[0] < spec.wavelengths[0] || p[0] > spec.wavelengths[spec.len() - 1] {
        return Err(Error::Degenerate(format!("mode centre {} left the fitted range", p[0])));
    }
    let mut cov = vec![vec![0.0; 5]; 5];
    for (a, &i) in cols.iter().enumerate() {
        for (b, &k) in cols.iter().enumerate() {
            cov[i][k] = free_cov[(a, b)];
        }
    }
    let errors = (0..5).map(|i| cov[i][i].max(0.0).sqrt()).collect();
    Ok(FanoFitResult {
        lambda_m: p[0],
        w_m: p[1],
        q_fano: p[2],
        amplitude: p[3],
        background: p[4],
        errors,
        covariance: cov,
        residual_variance: s2,
        iterations: report.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn lorentzian_limit() {
        // A Lorentzian peak of height H is the q -> infinity limit with A = H / q^2.
        let (l0, w, h, b) = (939.5, 3.0, 1.0, 0.2);
        let wl = grid(925.0, 954.0, 400);
        let y = wl
            .iter()
            .map(|&l| h / (1.0 + (2.0 * (l - l0) / w).powi(2)) + b)
            .collect();
        let s = Spectrum::new(wl, y).unwrap();
        // The least-squares optimum sits at q -> infinity, so hold q large.
        let q0: f64 = 1e4;
        let guess = FanoParams { lambda_m: 939.0, w_m: 2.5, q_fano: q0, amplitude: h / (q0 * q0), background: b };
        let opts = FanoFitOptions { guess: Some(guess), fixed_q: Some(q0), ..Default::default() };
        let r = fit_fano(&s, &opts).unwrap();
        assert!((r.lambda_m - l0).abs() / l0 < 1e-3, "{r:?}");
        assert!((r.w_m - w).abs() / w < 1e-3, "{r:?}");
        assert!((r.amplitude * q0 * q0 - h).abs() / h < 1e-3);
    }

    #[test]
    fn symmetric_dip_centre_is_minimum() {
        let truth = FanoParams { lambda_m: 939.5, w_m: 3.0, q_fano: 0.0, amplitude: 0.6, background: 0.3 };
        let wl = grid(930.0, 949.0, 381);
        let y: Vec<f64> = wl.iter().map(|&l| truth.eval(l)).collect();
        let s = Spectrum::new(wl.clone(), y.clone()).unwrap();
        let r = fit_fano(&s, &FanoFitOptions::default()).unwrap();
        let imin = (0..y.len()).min_by(|&a, &b| y[a].total_cmp(&y[b])).unwrap();
        assert!((r.lambda_m - wl[imin]).abs() < 1e-6);
        assert!(r.q_fano.abs() < 1e-6);
    }

    #[test]
    fn noisy_fano_within_three_sigma() {
        let truth = FanoParams { lambda_m: 939.5, w_m: 3.0, q_fano: -1.0, amplitude: 0.5, background: 0.2 };
        let wl = grid(930.0, 949.0, 400);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let y = wl
            .iter()
            .map(|&l| {
                let m = truth.eval(l);
                m * (1.0 + Normal::new(0.0, 0.01).unwrap().sample(&mut rng))
            })
            .collect();
        let s = Spectrum::new(wl, y).unwrap();
        let r = fit_fano(&s, &FanoFitOptions::default()).unwrap();
        for (got, (want, err)) in [r.lambda_m, r.w_m, r.q_fano].iter().zip([
            (truth.lambda_m, r.errors[0]),
            (truth.w_m, r.errors[1]),
            (truth.q_fano, r.errors[2]),
        ]) {
            assert!((got - want).abs() < 3.0 * err, "{got} vs {want} +- {err}");
        }
    }

    #[test]
    fn flat_spectrum_is_degenerate() {
        let wl = grid(930.0, 949.0, 100);
        let s = Spectrum::new(wl, vec![1.0; 100]).unwrap();
        assert!(matches!(fit_fano(&s, &FanoFitOptions::default()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let truth = FanoParams { lambda_m: 939.5, w_m: 3.0, q_fano: -1.0, amplitude: 0.5, background: 0.2 };
        let wl = grid(930.0, 949.0, 200);
        let y = wl.iter().map(|&l| truth.eval(l) + 0.01 * (l * 7.0).sin()).collect();
        let s = Spectrum::new(wl, y).unwrap();
        let obj = FanoObjective { spectrum: &s, fixed_q: None };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let p = [
                rng.random_range(937.0..942.0),
                rng.random_range(1.5..5.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(0.2..1.0),
                rng.random_range(0.0..0.5),
            ];
            let g = obj.gradient(&p).unwrap();
            for i in 0..5 {
                let h = 1e-5;
                let mut pp = p;
                let mut pm = p;
                pp[i] += h;
                pm[i] -= h;
                let fd = (obj.value(&pp).unwrap() - obj.value(&pm).unwrap()) / (2.0 * h);
                let rel = (fd - g[i]).abs() / g[i].abs().max(1e-8);
                assert!(rel < 1e-6, "param {i}: analytic {} fd {fd}", g[i]);
            }
        }
    }
}
