//! Exact full-data maximum partial likelihood by Newton-Raphson, with
//! inverse-information standard errors. Used as the reference for SVI.

use serde::{Deserialize, Serialize};

use crate::data::IntervalRecord;
use crate::error::{CoxError, Result};
use crate::likelihood::{CoxLikelihood, LogLikelihood};
use crate::variational::PosteriorSummary;

/// Largest dimension the dense-Hessian solver accepts.
pub const MAX_ORACLE_DIM: usize = 200;

const MAX_HALVINGS: usize = 40;

/// A coefficient whose linear-predictor range exceeds this is treated as
/// diverging to infinity (monotone likelihood).
const MONOTONE_BOUND: f64 = 50.0;

/// Standard error (linear-predictor scale) beyond which the likelihood is
/// taken as flat along that coefficient.
const FLAT_BOUND: f64 = 1e4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleResult {
    pub theta_hat: Vec<f64>,
    pub standard_errors: Vec<f64>,
    /// Row-major inverse observed information.
    pub covariance: Vec<Vec<f64>>,
    pub converged: bool,
    pub iterations: usize,
    pub loglik: f64,
}

impl MleResult {
    /// Wald intervals in the posterior-summary schema.
    pub fn summary(&self, names: &[String], level: f64) -> Result<PosteriorSummary> {
        PosteriorSummary::from_moments(names, &self.theta_hat, &self.standard_errors, level)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 100,
        }
    }
}

/// Newton-Raphson on the exact Breslow partial likelihood. A step that
/// lowers the log-likelihood is halved until it does not.
pub fn newton_fit(records: &[IntervalRecord], init: Option<&[f64]>, tol: f64, max_iter: usize) -> Result<MleResult> {
    let lik = CoxLikelihood::exact(records)?;
    let p = lik.dim();
    if p == 0 {
        return Err(CoxError::InvalidArgument("no covariates".into()));
    }
    if p > MAX_ORACLE_DIM {
        return Err(CoxError::InvalidArgument(format!(
            "oracle supports at most {MAX_ORACLE_DIM} covariates, got {p}"
        )));
    }
    let mut theta = match init {
        Some(t) if t.len() != p => {
            return Err(CoxError::Dimension {
                expected: p,
                got: t.len(),
            })
        }
        Some(t) => t.to_vec(),
        None => vec![0.0; p],
    };

    let mut converged = false;
    let mut iterations = 0;
    let (mut ll, mut score, mut info) = lik.information(&theta)?;
    while iterations < max_iter {
        if score.iter().all(|g| g.abs() < tol) {
            converged = true;
            break;
        }
        iterations += 1;
        let chol = info
            .clone()
            .cholesky()
            .ok_or_else(|| CoxError::Singular(format!("information not positive definite at iteration {iterations}")))?;
        let delta = chol.solve(&nalgebra::DVector::from_column_slice(&score));

        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let trial: Vec<f64> = theta.iter().zip(delta.iter()).map(|(t, d)| t + scale * d).collect();
            if let Ok(v) = lik.value(&trial) {
                // round-off near the optimum must not stall the iteration
                if v >= ll - 1e-12 * (1.0 + ll.abs()) {
                    accepted = Some(trial);
                    break;
                }
            }
            scale *= 0.5;
        }
        match accepted {
            Some(t) => theta = t,
            None => break,
        }
        (ll, score, info) = lik.information(&theta)?;
    }
    if !converged && score.iter().all(|g| g.abs() < tol) {
        converged = true;
    }
    let spreads: Vec<f64> = (0..p)
        .map(|j| records.iter().map(|r| r.covariates[j].abs()).fold(0.0, f64::max))
        .collect();
    for j in 0..p {
        if theta[j].abs() * spreads[j] > MONOTONE_BOUND {
            return Err(CoxError::Singular(format!("coefficient {j} diverges ({})", theta[j])));
        }
    }

    let chol = info
        .clone()
        .cholesky()
        .ok_or_else(|| CoxError::Singular("information not positive definite at the optimum".into()))?;
    let cov = chol.inverse();
    let standard_errors: Vec<f64> = (0..p).map(|j| cov[(j, j)].sqrt()).collect();
    for j in 0..p {
        if !(standard_errors[j] * spreads[j] <= FLAT_BOUND) {
            return Err(CoxError::Singular(format!(
                "monotone likelihood: coefficient {j} is not identified ({})",
                theta[j]
            )));
        }
    }
    let covariance = (0..p).map(|i| (0..p).map(|j| cov[(i, j)]).collect()).collect();
    Ok(MleResult {
        theta_hat: theta,
        standard_errors,
        covariance,
        converged,
        iterations,
        loglik: ll,
    })
}
