//! Independent per-coefficient priors on θ.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{CoxError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorSpec {
    /// Normal(0, sigma²).
    Normal { sigma: f64 },
    /// Student-t with `nu` degrees of freedom and scale `s`; `nu = 1` is the
    /// Cauchy prior used for sparse, high-dimensional fits.
    StudentT { nu: f64, s: f64 },
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec::Normal { sigma: 1.0 }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            PriorSpec::Normal { sigma } => sigma > 0.0 && sigma.is_finite(),
            PriorSpec::StudentT { nu, s } => nu > 0.0 && s > 0.0 && nu.is_finite() && s.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(CoxError::InvalidArgument(format!("invalid prior {self:?}")))
        }
    }

    /// Normalizing constant of one coordinate's log density.
    fn log_norm(&self) -> f64 {
        match *self {
            PriorSpec::Normal { sigma } => -0.5 * (2.0 * std::f64::consts::PI).ln() - sigma.ln(),
            PriorSpec::StudentT { nu, s } => {
                ln_gamma(0.5 * (nu + 1.0)) - ln_gamma(0.5 * nu) - 0.5 * (nu * std::f64::consts::PI).ln() - s.ln()
            }
        }
    }

    fn log_kernel(&self, x: f64) -> f64 {
        match *self {
            PriorSpec::Normal { sigma } => -0.5 * (x / sigma).powi(2),
            PriorSpec::StudentT { nu, s } => {
                let z = x / s;
                -0.5 * (nu + 1.0) * (z * z / nu).ln_1p()
            }
        }
    }

    fn dlog(&self, x: f64) -> f64 {
        match *self {
            PriorSpec::Normal { sigma } => -x / (sigma * sigma),
            PriorSpec::StudentT { nu, s } => -(nu + 1.0) * x / (nu * s * s + x * x),
        }
    }
}

/// Sum of the per-coordinate log densities, normalizing constants included.
pub fn log_prior(theta: &[f64], spec: &PriorSpec) -> Result<f64> {
    spec.validate()?;
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(CoxError::NonFinite("theta".into()));
    }
    let kernel: f64 = theta.iter().map(|&x| spec.log_kernel(x)).sum();
    Ok(theta.len() as f64 * spec.log_norm() + kernel)
}

pub fn log_prior_grad(theta: &[f64], spec: &PriorSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(CoxError::NonFinite("theta".into()));
    }
    Ok(theta.iter().map(|&x| spec.dlog(x)).collect())
}
