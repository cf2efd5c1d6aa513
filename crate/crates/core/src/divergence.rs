//! Concave φ functions for the d_ψ divergence family.
//!
//! | kind           | φ(x)              | φ′(x)              |
//! |----------------|-------------------|--------------------|
//! | `kl`           | −e^{−x}           | e^{−x}             |
//! | `js`           | ln(2 − e^{−x})    | e^{−x}/(2 − e^{−x})|
//! | `chi2`         | x − x²/4          | 1 − x/2            |
//! | `chi2-mixture` | x                 | 1                  |
//!
//! For `chi2-mixture` the quadratic part moves into [`mixture_regularizer`],
//! which penalizes r² on both data and model samples.
//!
//! φ_JS is −∞ below −ln 2, so it is replaced by a steep concave quadratic
//! left of `−ln 2 + margin`, joined with matching value and slope.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhiKind {
    #[serde(rename = "kl")]
    Kl,
    #[serde(rename = "js")]
    Js,
    #[serde(rename = "chi2")]
    Chi2,
    #[serde(rename = "chi2-mixture")]
    Chi2Mixture,
}

impl PhiKind {
    pub const ALL: [PhiKind; 4] = [PhiKind::Kl, PhiKind::Js, PhiKind::Chi2, PhiKind::Chi2Mixture];

    pub fn as_str(self) -> &'static str {
        match self {
            PhiKind::Kl => "kl",
            PhiKind::Js => "js",
            PhiKind::Chi2 => "chi2",
            PhiKind::Chi2Mixture => "chi2-mixture",
        }
    }
}

impl fmt::Display for PhiKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for PhiKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kl" => Ok(PhiKind::Kl),
            "js" => Ok(PhiKind::Js),
            "chi2" => Ok(PhiKind::Chi2),
            "chi2-mixture" | "chi2_mixture" => Ok(PhiKind::Chi2Mixture),
            other => Err(Error::InvalidArgument(format!(
                "unknown divergence {other:?} (expected kl, js, chi2, chi2-mixture)"
            ))),
        }
    }
}

/// Quadratic continuation of φ_JS near its singularity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JsGuard {
    /// The join sits at `−ln 2 + margin`.
    pub margin: f64,
    /// Second derivative of the continuation (negative).
    pub curvature: f64,
}

impl Default for JsGuard {
    fn default() -> Self {
        Self {
            margin: 0.05,
            curvature: -100.0,
        }
    }
}

impl JsGuard {
    pub fn join(&self) -> f64 {
        -std::f64::consts::LN_2 + self.margin
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhiSpec {
    pub kind: PhiKind,
    pub alpha: f64,
    pub mixture_c: f64,
    pub mixture_beta: f64,
    pub js_guard: JsGuard,
}

impl PhiSpec {
    pub fn new(kind: PhiKind, alpha: f64) -> Result<Self> {
        let spec = Self {
            kind,
            alpha,
            mixture_c: 0.5,
            mixture_beta: 0.5,
            js_guard: JsGuard::default(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.mixture_beta) {
            return Err(Error::InvalidArgument(format!(
                "mixture_beta must lie in [0, 1], got {}",
                self.mixture_beta
            )));
        }
        if !(self.mixture_c >= 0.0 && self.mixture_c.is_finite()) {
            return Err(Error::InvalidArgument(format!("mixture_c must be non-negative, got {}", self.mixture_c)));
        }
        if !(self.js_guard.margin > 0.0 && self.js_guard.curvature < 0.0) {
            return Err(Error::InvalidArgument("js guard needs margin > 0 and curvature < 0".into()));
        }
        Ok(())
    }

    pub fn is_mixture(&self) -> bool {
        self.kind == PhiKind::Chi2Mixture
    }
}

fn js_raw(x: f64) -> f64 {
    (2.0 - (-x).exp()).ln()
}

fn js_raw_prime(x: f64) -> f64 {
    let e = (-x).exp();
    e / (2.0 - e)
}

pub fn phi(spec: &PhiSpec, x: f64) -> f64 {
    match spec.kind {
        PhiKind::Kl => -(-x).exp(),
        PhiKind::Chi2 => x - 0.25 * x * x,
        PhiKind::Chi2Mixture => x,
        PhiKind::Js => {
            let x0 = spec.js_guard.join();
            if x > x0 {
                js_raw(x)
            } else {
                let d = x - x0;
                js_raw(x0) + js_raw_prime(x0) * d + 0.5 * spec.js_guard.curvature * d * d
            }
        }
    }
}

pub fn phi_prime(spec: &PhiSpec, x: f64) -> f64 {
    match spec.kind {
        PhiKind::Kl => (-x).exp(),
        PhiKind::Chi2 => 1.0 - 0.5 * x,
        PhiKind::Chi2Mixture => 1.0,
        PhiKind::Js => {
            let x0 = spec.js_guard.join();
            if x > x0 {
                js_raw_prime(x)
            } else {
                js_raw_prime(x0) + spec.js_guard.curvature * (x - x0)
            }
        }
    }
}

/// The composite consumed by the objective: `(φ(αx) − φ(0)) / α`.
///
/// Centering by φ(0) leaves gradients untouched and makes the composite
/// converge to `x` as α → 0 for every kind (φ_KL(0) = −1 would otherwise
/// contribute a diverging −1/α).
pub fn scaled_phi(spec: &PhiSpec, x: f64) -> f64 {
    let a = spec.alpha;
    (phi(spec, a * x) - phi(spec, 0.0)) / a
}

pub fn scaled_phi_prime(spec: &PhiSpec, x: f64) -> f64 {
    phi_prime(spec, spec.alpha * x)
}

/// `β·c·mean(r_data²) + (1−β)·c·mean(r_model²)`. Empty sides contribute 0.
pub fn mixture_regularizer(spec: &PhiSpec, r_data: &[f64], r_model: &[f64]) -> Result<f64> {
    if !spec.is_mixture() {
        return Err(Error::InvalidArgument(format!(
            "mixture regularizer requested for divergence {}",
            spec.kind
        )));
    }
    let mean_sq = |r: &[f64]| {
        if r.is_empty() {
            0.0
        } else {
            r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64
        }
    };
    let c = spec.mixture_c;
    let b = spec.mixture_beta;
    Ok(b * c * mean_sq(r_data) + (1.0 - b) * c * mean_sq(r_model))
}
