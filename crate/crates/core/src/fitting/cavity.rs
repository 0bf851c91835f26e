//! Cavity quality factor and Purcell enhancement from fitted quantities.

use crate::error::{Error, Result};
use crate::measured::Measured;

/// `Q = lambda_m / w_m` with first-order error propagation from the
/// `(lambda_m, w_m)` covariance block.
pub fn q_factor(lambda_m: f64, w_m: f64, cov: [[f64; 2]; 2]) -> Result<Measured> {
    if !(w_m > 0.0) || !w_m.is_finite() {
        return Err(Error::Domain(format!("linewidth {w_m} nm gives an unbounded Q")));
    }
    let q = lambda_m / w_m;
    let dl = 1.0 / w_m;
    let dw = -lambda_m / (w_m * w_m);
    let var = dl * dl * cov[0][0] + 2.0 * dl * dw * cov[0][1] + dw * dw * cov[1][1];
    Ok(Measured::new(q, var.max(0.0).sqrt()))
}

/// `F_P = t1_ref / t1` with relative errors combined in quadrature.
pub fn purcell_factor(t1_ref: Measured, t1: Measured) -> Result<Measured> {
    if !(t1_ref.value > 0.0 && t1.value > 0.0) {
        return Err(Error::Domain("lifetimes must be positive".into()));
    }
    Ok(t1_ref.div(t1))
}
