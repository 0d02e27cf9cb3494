//! Gaussian variational families for q(θ) and their reparameterized
//! sampling, entropy, and marginal summaries.
//!
//! All scale parameters are unconstrained; positive quantities go through
//! softplus. Parameter layout of `scale_raw`:
//!
//! * mean-field: `p` raw marginal sds;
//! * full-rank: packed lower-triangular Cholesky factor, row by row
//!   (`L[i][j]` at `i*(i+1)/2 + j`), diagonal entries raw;
//! * low-rank: `W` (`rank × p`, row-major) followed by `p` raw diagonal sds.
//!   The covariance is `WᵀW + diag(d)²`; with `unit_diagonal` set `d ≡ 1`
//!   and the trailing block is ignored.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as NormalDist};

use crate::error::{CoxError, Result};

pub const INIT_SD: f64 = 0.1;
pub const INIT_W_SD: f64 = 0.01;

const HALF_LOG_2PI_E: f64 = 1.418_938_533_204_672_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Family {
    MeanField,
    FullRank,
    LowRank { rank: usize },
}

impl std::str::FromStr for Family {
    type Err = CoxError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "meanfield" => Ok(Family::MeanField),
            "fullrank" => Ok(Family::FullRank),
            "lowrank" => Ok(Family::LowRank { rank: 1 }),
            other => Err(CoxError::InvalidArgument(format!("unknown family `{other}`"))),
        }
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for `y > 0`.
#[inline]
pub fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalState {
    pub family: Family,
    pub loc: Vec<f64>,
    pub scale_raw: Vec<f64>,
    #[serde(default)]
    pub unit_diagonal: bool,
}

fn packed(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

impl VariationalState {
    pub fn dim(&self) -> usize {
        self.loc.len()
    }

    pub fn rank(&self) -> usize {
        match self.family {
            Family::LowRank { rank } => rank,
            _ => 0,
        }
    }

    /// Length of the standard-normal noise vector one draw consumes.
    pub fn noise_dim(&self) -> usize {
        self.rank() + self.dim()
    }

    pub fn n_params(&self) -> usize {
        self.loc.len() + self.scale_raw.len()
    }

    fn expected_scale_len(family: Family, p: usize) -> usize {
        match family {
            Family::MeanField => p,
            Family::FullRank => p * (p + 1) / 2,
            Family::LowRank { rank } => rank * p + p,
        }
    }

    /// Checks layout and positivity.
    pub fn validate(&self) -> Result<()> {
        let p = self.dim();
        if p == 0 {
            return Err(CoxError::InvalidArgument("empty variational state".into()));
        }
        let want = Self::expected_scale_len(self.family, p);
        if self.scale_raw.len() != want {
            return Err(CoxError::Dimension {
                expected: want,
                got: self.scale_raw.len(),
            });
        }
        if let Family::LowRank { rank } = self.family {
            if rank == 0 || rank > p {
                return Err(CoxError::InvalidArgument(format!("rank {rank} must be in 1..={p}")));
            }
        }
        if self.loc.iter().chain(&self.scale_raw).any(|v| !v.is_finite()) {
            return Err(CoxError::NonFinite("variational parameters".into()));
        }
        if self.diag_factors().iter().any(|&d| d <= 0.0) {
            return Err(CoxError::InvalidArgument("covariance factor is not positive definite".into()));
        }
        Ok(())
    }

    /// Positive diagonal of the scale factor: marginal sds (mean-field),
    /// Cholesky diagonal (full-rank) or `d` (low-rank).
    pub fn diag_factors(&self) -> Vec<f64> {
        let p = self.dim();
        match self.family {
            Family::MeanField => self.scale_raw.iter().map(|&r| softplus(r)).collect(),
            Family::FullRank => (0..p).map(|i| softplus(self.scale_raw[packed(i, i)])).collect(),
            Family::LowRank { rank } => {
                if self.unit_diagonal {
                    vec![1.0; p]
                } else {
                    self.scale_raw[rank * p..].iter().map(|&r| softplus(r)).collect()
                }
            }
        }
    }

    /// `W` as a `rank × p` matrix (low-rank only).
    fn w(&self) -> &[f64] {
        let p = self.dim();
        &self.scale_raw[..self.rank() * p]
    }

    /// `θ = μ + factor · ε` for one noise vector.
    pub fn transform(&self, eps: &[f64]) -> Vec<f64> {
        let p = self.dim();
        let mut theta = self.loc.clone();
        match self.family {
            Family::MeanField => {
                for j in 0..p {
                    theta[j] += softplus(self.scale_raw[j]) * eps[j];
                }
            }
            Family::FullRank => {
                for i in 0..p {
                    let mut acc = softplus(self.scale_raw[packed(i, i)]) * eps[i];
                    for j in 0..i {
                        acc += self.scale_raw[packed(i, j)] * eps[j];
                    }
                    theta[i] += acc;
                }
            }
            Family::LowRank { rank } => {
                let (eps_r, eps_p) = eps.split_at(rank);
                let w = self.w();
                for (r, &e) in eps_r.iter().enumerate() {
                    let row = &w[r * p..(r + 1) * p];
                    for j in 0..p {
                        theta[j] += row[j] * e;
                    }
                }
                let d = self.diag_factors();
                for j in 0..p {
                    theta[j] += d[j] * eps_p[j];
                }
            }
        }
        theta
    }

    /// Accumulates the pathwise gradient of `f(θ(ε))` into `grad`, given
    /// `g = ∇f(θ)`. `grad` is laid out as `loc ++ scale_raw`.
    pub fn backprop(&self, eps: &[f64], g: &[f64], grad: &mut [f64]) {
        let p = self.dim();
        let (g_loc, g_scale) = grad.split_at_mut(p);
        for j in 0..p {
            g_loc[j] += g[j];
        }
        match self.family {
            Family::MeanField => {
                for j in 0..p {
                    g_scale[j] += g[j] * eps[j] * sigmoid(self.scale_raw[j]);
                }
            }
            Family::FullRank => {
                for i in 0..p {
                    for j in 0..i {
                        g_scale[packed(i, j)] += g[i] * eps[j];
                    }
                    let k = packed(i, i);
                    g_scale[k] += g[i] * eps[i] * sigmoid(self.scale_raw[k]);
                }
            }
            Family::LowRank { rank } => {
                let (eps_r, eps_p) = eps.split_at(rank);
                for (r, &e) in eps_r.iter().enumerate() {
                    let row = &mut g_scale[r * p..(r + 1) * p];
                    for j in 0..p {
                        row[j] += e * g[j];
                    }
                }
                if !self.unit_diagonal {
                    let raw = &self.scale_raw[rank * p..];
                    let gd = &mut g_scale[rank * p..];
                    for j in 0..p {
                        gd[j] += g[j] * eps_p[j] * sigmoid(raw[j]);
                    }
                }
            }
        }
    }

    /// `I_R + W D⁻² Wᵀ` and its Cholesky factor (low-rank only).
    fn capacitance(&self, d: &[f64]) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
        let p = self.dim();
        let rank = self.rank();
        let w = self.w();
        let inv_d2: Vec<f64> = d.iter().map(|v| 1.0 / (v * v)).collect();
        let mut k = DMatrix::<f64>::identity(rank, rank);
        for a in 0..rank {
            let ra = &w[a * p..(a + 1) * p];
            for b in 0..=a {
                let rb = &w[b * p..(b + 1) * p];
                let s: f64 = (0..p).map(|j| ra[j] * rb[j] * inv_d2[j]).sum();
                k[(a, b)] += s;
                if a != b {
                    k[(b, a)] += s;
                }
            }
        }
        k.cholesky()
            .ok_or_else(|| CoxError::InvalidArgument("low-rank capacitance is not positive definite".into()))
    }

    /// `½ log det Σ`.
    pub fn half_log_det(&self) -> Result<f64> {
        self.validate()?;
        let d = self.diag_factors();
        let base: f64 = d.iter().map(|v| v.ln()).sum();
        match self.family {
            Family::MeanField | Family::FullRank => Ok(base),
            Family::LowRank { .. } => {
                let chol = self.capacitance(&d)?;
                let logdet_k: f64 = chol.l().diagonal().iter().map(|v| v.ln()).sum();
                Ok(base + logdet_k)
            }
        }
    }

    /// Differential entropy of q.
    pub fn entropy(&self) -> Result<f64> {
        Ok(self.dim() as f64 * HALF_LOG_2PI_E + self.half_log_det()?)
    }

    /// Gradient of the entropy with respect to `scale_raw`.
    pub fn entropy_grad(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let p = self.dim();
        let mut out = vec![0.0; self.scale_raw.len()];
        match self.family {
            Family::MeanField => {
                for j in 0..p {
                    let r = self.scale_raw[j];
                    out[j] = sigmoid(r) / softplus(r);
                }
            }
            Family::FullRank => {
                for i in 0..p {
                    let k = packed(i, i);
                    let r = self.scale_raw[k];
                    out[k] = sigmoid(r) / softplus(r);
                }
            }
            Family::LowRank { rank } => {
                let d = self.diag_factors();
                let chol = self.capacitance(&d)?;
                let w = DMatrix::from_row_slice(rank, p, self.w());
                // ∂/∂W = K⁻¹ W D⁻²
                let mut wd = w.clone();
                for j in 0..p {
                    let s = 1.0 / (d[j] * d[j]);
                    wd.column_mut(j).scale_mut(s);
                }
                let kinv_wd = chol.solve(&wd);
                for r in 0..rank {
                    for j in 0..p {
                        out[r * p + j] = kinv_wd[(r, j)];
                    }
                }
                if !self.unit_diagonal {
                    // ∂/∂d_j = 1/d_j − w_jᵀ K⁻¹ w_j / d_j³
                    for j in 0..p {
                        let quad: f64 = (0..rank).map(|r| w[(r, j)] * kinv_wd[(r, j)]).sum::<f64>() * d[j] * d[j];
                        let dj = d[j];
                        let dd = 1.0 / dj - quad / (dj * dj * dj);
                        out[rank * p + j] = dd * sigmoid(self.scale_raw[rank * p + j]);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Marginal variances `Σ_jj`.
    pub fn marginal_variances(&self) -> Vec<f64> {
        let p = self.dim();
        let d = self.diag_factors();
        match self.family {
            Family::MeanField => d.iter().map(|v| v * v).collect(),
            Family::FullRank => (0..p)
                .map(|i| d[i] * d[i] + (0..i).map(|j| self.scale_raw[packed(i, j)].powi(2)).sum::<f64>())
                .collect(),
            Family::LowRank { rank } => {
                let w = self.w();
                (0..p)
                    .map(|j| d[j] * d[j] + (0..rank).map(|r| w[r * p + j].powi(2)).sum::<f64>())
                    .collect()
            }
        }
    }

    pub fn marginal_sds(&self) -> Vec<f64> {
        self.marginal_variances().into_iter().map(f64::sqrt).collect()
    }

    /// Dense lower factor `F` with `Σ = F Fᵀ` (`p × (rank + p)` for low-rank).
    pub fn dense_factor(&self) -> DMatrix<f64> {
        let p = self.dim();
        let d = self.diag_factors();
        match self.family {
            Family::MeanField => DMatrix::from_diagonal(&DVector::from_vec(d)),
            Family::FullRank => {
                let mut l = DMatrix::zeros(p, p);
                for i in 0..p {
                    for j in 0..i {
                        l[(i, j)] = self.scale_raw[packed(i, j)];
                    }
                    l[(i, i)] = d[i];
                }
                l
            }
            Family::LowRank { rank } => {
                let w = DMatrix::from_row_slice(rank, p, self.w());
                let mut f = DMatrix::zeros(p, rank + p);
                f.view_mut((0, 0), (p, rank)).copy_from(&w.transpose());
                for j in 0..p {
                    f[(j, rank + j)] = d[j];
                }
                f
            }
        }
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let f = self.dense_factor();
        &f * f.transpose()
    }

    /// Mean-field state with the given means and marginal sds.
    pub fn mean_field(loc: Vec<f64>, sds: &[f64]) -> Self {
        Self {
            family: Family::MeanField,
            loc,
            scale_raw: sds.iter().map(|&s| softplus_inv(s)).collect(),
            unit_diagonal: false,
        }
    }
}

/// Zero mean, marginal sds 0.1; low-rank `W` entries drawn from
/// Normal(0, 0.01²).
pub fn init_state<R: Rng + ?Sized>(p: usize, family: Family, unit_diagonal: bool, rng: &mut R) -> Result<VariationalState> {
    init_state_with(p, family, unit_diagonal, INIT_SD, rng)
}

/// As [`init_state`] with diagonal scale `init_sd`. With `unit_diagonal`
/// the diagonal is fixed at 1 whatever `init_sd` is.
pub fn init_state_with<R: Rng + ?Sized>(
    p: usize,
    family: Family,
    unit_diagonal: bool,
    init_sd: f64,
    rng: &mut R,
) -> Result<VariationalState> {
    if p == 0 {
        return Err(CoxError::InvalidArgument("p must be at least 1".into()));
    }
    if !(init_sd > 0.0 && init_sd.is_finite()) {
        return Err(CoxError::InvalidArgument(format!("initial scale {init_sd} must be positive")));
    }
    let raw_sd = softplus_inv(init_sd);
    let scale_raw = match family {
        Family::MeanField => vec![raw_sd; p],
        Family::FullRank => {
            let mut v = vec![0.0; p * (p + 1) / 2];
            for i in 0..p {
                v[packed(i, i)] = raw_sd;
            }
            v
        }
        Family::LowRank { rank } => {
            if rank == 0 || rank > p {
                return Err(CoxError::InvalidArgument(format!("rank {rank} must be in 1..={p}")));
            }
            let normal = Normal::new(0.0, INIT_W_SD).expect("valid sd");
            let mut v: Vec<f64> = (0..rank * p).map(|_| normal.sample(rng)).collect();
            v.extend(std::iter::repeat_n(raw_sd, p));
            v
        }
    };
    Ok(VariationalState {
        family,
        loc: vec![0.0; p],
        scale_raw,
        unit_diagonal,
    })
}

pub fn draw_noise<R: Rng + ?Sized>(state: &VariationalState, rng: &mut R) -> Vec<f64> {
    (0..state.noise_dim()).map(|_| StandardNormal.sample(rng)).collect()
}

/// `n_samples` reparameterized draws; returns `(thetas, noises)`.
pub fn sample_theta<R: Rng + ?Sized>(
    state: &VariationalState,
    rng: &mut R,
    n_samples: usize,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let noises: Vec<Vec<f64>> = (0..n_samples).map(|_| draw_noise(state, rng)).collect();
    let thetas = noises.iter().map(|e| state.transform(e)).collect();
    (thetas, noises)
}

pub fn entropy(state: &VariationalState) -> Result<f64> {
    state.entropy()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub hpd_low: f64,
    pub hpd_high: f64,
    pub hr: f64,
    pub hr_low: f64,
    pub hr_high: f64,
}

impl CoefficientSummary {
    pub fn excludes_zero(&self) -> bool {
        self.hpd_low > 0.0 || self.hpd_high < 0.0
    }

    pub fn contains(&self, value: f64) -> bool {
        self.hpd_low <= value && value <= self.hpd_high
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub level: f64,
    pub coefficients: Vec<CoefficientSummary>,
}

/// Two-sided standard-normal quantile for a central interval.
pub fn central_z(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(CoxError::InvalidArgument(format!("level {level} not in (0, 1)")));
    }
    Ok(NormalDist::new(0.0, 1.0).expect("standard normal").inverse_cdf(0.5 * (1.0 + level)))
}

impl PosteriorSummary {
    /// Central `mean ± z·sd` intervals; for Gaussian marginals these are the
    /// HPD intervals, and for a Wald fit the confidence intervals.
    pub fn from_moments(names: &[String], means: &[f64], sds: &[f64], level: f64) -> Result<Self> {
        if means.len() != sds.len() || names.len() != means.len() {
            return Err(CoxError::Dimension {
                expected: means.len(),
                got: sds.len().min(names.len()),
            });
        }
        let z = central_z(level)?;
        let coefficients = names
            .iter()
            .zip(means.iter().zip(sds))
            .map(|(name, (&mean, &sd))| {
                let (lo, hi) = (mean - z * sd, mean + z * sd);
                CoefficientSummary {
                    name: name.clone(),
                    mean,
                    sd,
                    hpd_low: lo,
                    hpd_high: hi,
                    hr: mean.exp(),
                    hr_low: lo.exp(),
                    hr_high: hi.exp(),
                }
            })
            .collect();
        Ok(Self { level, coefficients })
    }

    pub fn means(&self) -> Vec<f64> {
        self.coefficients.iter().map(|c| c.mean).collect()
    }

    /// Indicator per coefficient: interval excludes zero.
    pub fn identified(&self) -> Vec<bool> {
        self.coefficients.iter().map(CoefficientSummary::excludes_zero).collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for c in &self.coefficients {
            w.serialize(c)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(reader: R, level: f64) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let coefficients = r.deserialize().collect::<std::result::Result<Vec<CoefficientSummary>, _>>()?;
        Ok(Self { level, coefficients })
    }
}

pub fn marginal_summary(state: &VariationalState, names: &[String], level: f64) -> Result<PosteriorSummary> {
    state.validate()?;
    PosteriorSummary::from_moments(names, &state.loc, &state.marginal_sds(), level)
}
