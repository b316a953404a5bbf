//! Convex surrogates for the 0-1 loss and their excess-risk transforms.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{EarlError, Result};

/// Exponential arguments are capped here so `exp` stays finite.
const EXP_CAP: f64 = 700.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SurrogateLoss {
    /// `max(1 - t, 0)`
    #[serde(rename = "hinge")]
    Hinge,
    /// `exp(-t)`
    #[serde(rename = "exp")]
    Exponential,
    /// `log(1 + exp(-t))`, unscaled, so `phi(0) = ln 2`.
    #[serde(rename = "logistic")]
    Logistic,
    /// `max(1 - t, 0)^2`
    #[serde(rename = "sqhinge")]
    SquaredHinge,
}

impl SurrogateLoss {
    pub const ALL: [SurrogateLoss; 4] = [
        SurrogateLoss::Hinge,
        SurrogateLoss::Exponential,
        SurrogateLoss::Logistic,
        SurrogateLoss::SquaredHinge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SurrogateLoss::Hinge => "hinge",
            SurrogateLoss::Exponential => "exp",
            SurrogateLoss::Logistic => "logistic",
            SurrogateLoss::SquaredHinge => "sqhinge",
        }
    }

    /// Differentiable everywhere (everything but the hinge).
    pub fn is_smooth(self) -> bool {
        !matches!(self, SurrogateLoss::Hinge)
    }

    #[inline]
    pub fn value(self, t: f64) -> f64 {
        match self {
            SurrogateLoss::Hinge => (1.0 - t).max(0.0),
            SurrogateLoss::Exponential => (-t).min(EXP_CAP).exp(),
            SurrogateLoss::Logistic => {
                if t > 0.0 {
                    (-t).exp().ln_1p()
                } else {
                    -t + t.exp().ln_1p()
                }
            }
            SurrogateLoss::SquaredHinge => {
                let m = (1.0 - t).max(0.0);
                m * m
            }
        }
    }

    /// Derivative; for the hinge, the subgradient `-1` below the kink and
    /// `0` at and above it.
    #[inline]
    pub fn derivative(self, t: f64) -> f64 {
        match self {
            SurrogateLoss::Hinge => {
                if t < 1.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            SurrogateLoss::Exponential => -(-t).min(EXP_CAP).exp(),
            SurrogateLoss::Logistic => -1.0 / (1.0 + t.exp()),
            SurrogateLoss::SquaredHinge => -2.0 * (1.0 - t).max(0.0),
        }
    }

    /// Second derivative (generalized for the squared hinge, zero for the
    /// hinge).
    #[inline]
    pub fn second_derivative(self, t: f64) -> f64 {
        match self {
            SurrogateLoss::Hinge => 0.0,
            SurrogateLoss::Exponential => (-t).min(EXP_CAP).exp(),
            SurrogateLoss::Logistic => {
                let s = 1.0 / (1.0 + (-t).exp());
                s * (1.0 - s)
            }
            SurrogateLoss::SquaredHinge => {
                if t < 1.0 {
                    2.0
                } else {
                    0.0
                }
            }
        }
    }

    /// The transform `psi` bounding value shortfall by excess surrogate risk.
    pub fn psi(self, theta: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&theta) {
            return Err(EarlError::Domain(format!("psi is defined on [0, 1], got {theta}")));
        }
        Ok(self.psi_unchecked(theta))
    }

    fn psi_unchecked(self, theta: f64) -> f64 {
        match self {
            SurrogateLoss::Hinge => theta,
            SurrogateLoss::Exponential => 1.0 - (1.0 - theta * theta).sqrt(),
            SurrogateLoss::Logistic => {
                let up = (1.0 + theta) * theta.ln_1p();
                let down = if theta < 1.0 { (1.0 - theta) * (-theta).ln_1p() } else { 0.0 };
                0.5 * (up + down)
            }
            SurrogateLoss::SquaredHinge => theta * theta,
        }
    }

    /// `psi(1)`, the largest value `psi` attains on `[0, 1]`.
    pub fn psi_max(self) -> f64 {
        self.psi_unchecked(1.0)
    }

    /// Solves `psi(theta) = r` on `[0, 1]`.
    pub fn psi_inverse(self, r: f64) -> Result<f64> {
        let max = self.psi_max();
        if !(0.0..=max).contains(&r) {
            return Err(EarlError::Domain(format!(
                "psi inverse for {self} needs r in [0, {max}], got {r}"
            )));
        }
        match self {
            SurrogateLoss::Hinge => Ok(r),
            SurrogateLoss::SquaredHinge => Ok(r.sqrt()),
            _ => {
                let (mut lo, mut hi) = (0.0f64, 1.0f64);
                while hi - lo >= 1e-12 {
                    let mid = 0.5 * (lo + hi);
                    if self.psi_unchecked(mid) < r {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                Ok(0.5 * (lo + hi))
            }
        }
    }
}

impl fmt::Display for SurrogateLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SurrogateLoss {
    type Err = EarlError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hinge" => Ok(SurrogateLoss::Hinge),
            "exp" | "exponential" => Ok(SurrogateLoss::Exponential),
            "logistic" => Ok(SurrogateLoss::Logistic),
            "sqhinge" | "squared_hinge" => Ok(SurrogateLoss::SquaredHinge),
            other => Err(EarlError::config(format!(
                "unknown loss `{other}` (expected hinge, exp, logistic or sqhinge)"
            ))),
        }
    }
}
