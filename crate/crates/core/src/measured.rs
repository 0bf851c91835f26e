use std::fmt;

use serde::{Deserialize, Serialize};

/// A value with a one-sigma absolute uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measured {
    pub value: f64,
    pub err: f64,
}

impl Measured {
    pub fn new(value: f64, err: f64) -> Self {
        Self { value, err }
    }

    pub fn exact(value: f64) -> Self {
        Self { value, err: 0.0 }
    }

    pub fn rel_err(&self) -> f64 {
        if self.value == 0.0 {
            0.0
        } else {
            (self.err / self.value).abs()
        }
    }

    /// Quotient with relative errors added in quadrature.
    pub fn div(self, other: Measured) -> Measured {
        let value = self.value / other.value;
        let rel = self.rel_err().hypot(other.rel_err());
        Measured::new(value, (value * rel).abs())
    }

    /// Product with relative errors added in quadrature.
    pub fn mul(self, other: Measured) -> Measured {
        let value = self.value * other.value;
        let rel = self.rel_err().hypot(other.rel_err());
        Measured::new(value, (value * rel).abs())
    }
}

impl fmt::Display for Measured {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} +- {}", self.value, self.err)
    }
}
