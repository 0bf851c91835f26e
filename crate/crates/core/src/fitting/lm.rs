//! Damped Gauss-Newton (Levenberg-Marquardt) minimiser.
//!
//! Works on any scalar objective that can supply its gradient and a positive
//! semi-definite curvature estimate (Fisher information for Poisson deviance,
//! `2 J^T J` for least squares). Only steps that lower the objective are taken.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub trait Objective {
    fn n_params(&self) -> usize;

    /// Objective value, or `None` where the parameters are infeasible.
    fn value(&self, p: &[f64]) -> Option<f64>;

    /// Value, gradient and curvature estimate at a feasible point.
    fn linearize(&self, p: &[f64]) -> Option<(f64, DVector<f64>, DMatrix<f64>)>;
}

#[derive(Debug, Clone, Copy)]
pub struct LmConfig {
    pub max_iterations: usize,
    /// Stop once the largest relative parameter step falls below this.
    pub rel_step_tol: f64,
    pub initial_lambda: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            rel_step_tol: 1e-8,
            initial_lambda: 1e-3,
            lambda_up: 10.0,
            lambda_down: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmReport {
    pub params: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub last_step: f64,
}

fn rel_step(p: &[f64], delta: &DVector<f64>) -> f64 {
    p.iter()
        .zip(delta.iter())
        .map(|(x, d)| d.abs() / x.abs().max(1e-12))
        .fold(0.0, f64::max)
}

pub fn minimize<O: Objective>(obj: &O, p0: &[f64], cfg: &LmConfig) -> Result<LmReport> {
    let n = obj.n_params();
    assert_eq!(p0.len(), n);
    let mut p = p0.to_vec();
    let (mut f, mut g, mut h) = obj
        .linearize(&p)
        .ok_or_else(|| Error::Degenerate("initial parameters are infeasible".into()))?;
    let mut lambda = cfg.initial_lambda;
    let mut last_step = f64::INFINITY;

    for iter in 1..=cfg.max_iterations {
        loop {
            let mut a = h.clone();
            for i in 0..n {
                let d = h[(i, i)];
                a[(i, i)] += lambda * if d > 0.0 { d } else { 1.0 };
            }
            let delta = match a.cholesky() {
                Some(c) => c.solve(&(-&g)),
                None => {
                    lambda *= cfg.lambda_up;
                    if lambda > 1e20 {
                        return Err(Error::Degenerate("curvature matrix is singular".into()));
                    }
                    continue;
                }
            };
            let step = rel_step(&p, &delta);
            let trial: Vec<f64> = p.iter().zip(delta.iter()).map(|(x, d)| x + d).collect();
            match obj.value(&trial) {
                Some(ft) if ft < f => {
                    p = trial;
                    last_step = step;
                    let (nf, ng, nh) = obj
                        .linearize(&p)
                        .ok_or_else(|| Error::Degenerate("objective not differentiable at accepted step".into()))?;
                    f = nf;
                    g = ng;
                    h = nh;
                    lambda = (lambda * cfg.lambda_down).max(1e-12);
                    if step < cfg.rel_step_tol {
                        return Ok(LmReport { params: p, objective: f, iterations: iter, last_step });
                    }
                    break;
                }
                _ => {
                    // A rejected step this small means no representable
                    // improvement is left.
                    if step < cfg.rel_step_tol {
                        return Ok(LmReport { params: p, objective: f, iterations: iter, last_step: step });
                    }
                    lambda *= cfg.lambda_up;
                    if lambda > 1e20 {
                        return Ok(LmReport { params: p, objective: f, iterations: iter, last_step });
                    }
                }
            }
        }
    }
    Err(Error::NonConvergence {
        iterations: cfg.max_iterations,
        objective: f,
        last_step,
    })
}

/// Inverse of a symmetric matrix, symmetrised against round-off.
pub fn symmetric_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let inv = m.clone().try_inverse()?;
    Some((&inv + inv.transpose()) * 0.5)
}
