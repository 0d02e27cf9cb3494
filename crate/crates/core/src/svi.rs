//! Stochastic variational inference: Monte-Carlo ELBO with pathwise
//! gradients, an Adam update per step, and one fresh batch per step.

use std::io::Write;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_batch, Batch, BatchMode, DataSource, DatasetTotals};
use crate::error::{CoxError, Result};
use crate::likelihood::{CoxLikelihood, LogLikelihood};
use crate::priors::{log_prior, log_prior_grad, PriorSpec};
use crate::variational::{draw_noise, init_state_with, Family, VariationalState, INIT_SD};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BatchSpec {
    /// Every step sees the full dataset with unit weights.
    Full,
    Sample { mode: BatchMode, size: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub window: usize,
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub steps: usize,
    pub mc_samples: usize,
    pub batch: BatchSpec,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Learning rate at the last step as a fraction of `learning_rate`;
    /// the rate decays geometrically in between. 1.0 keeps it constant.
    pub final_lr_fraction: f64,
    pub seed: u64,
    pub convergence: Option<Convergence>,
    /// Pin the low-rank diagonal to the identity.
    pub unit_diagonal: bool,
    /// Initial marginal scale of the approximation.
    pub init_sd: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            mc_samples: 1,
            batch: BatchSpec::Full,
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            final_lr_fraction: 1.0,
            seed: 0,
            convergence: None,
            unit_diagonal: false,
            init_sd: INIT_SD,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoxError::InvalidArgument(m.to_string()));
        if self.mc_samples == 0 {
            return bad("mc_samples must be at least 1");
        }
        if !(self.init_sd > 0.0 && self.init_sd.is_finite()) {
            return bad("init_sd must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("optimizer decay rates must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return bad("final_lr_fraction must lie in (0, 1]");
        }
        if let BatchSpec::Sample { size: 0, .. } = self.batch {
            return bad("batch size must be at least 1");
        }
        if let Some(c) = self.convergence {
            if c.window < 2 {
                return bad("convergence window must be at least 2");
            }
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        if self.final_lr_fraction == 1.0 || self.steps <= 1 {
            return self.learning_rate;
        }
        let frac = step as f64 / (self.steps - 1) as f64;
        self.learning_rate * self.final_lr_fraction.powf(frac)
    }
}

/// Adam with bias-corrected moments; ascends the objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            beta1,
            beta2,
            epsilon,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn from_config(n_params: usize, config: &FitConfig) -> Self {
        Self::new(n_params, config.beta1, config.beta2, config.epsilon)
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] += lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub elbo: f64,
    pub loglik: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct ElboEvaluation {
    pub elbo: f64,
    /// Mean log-likelihood over the MC draws.
    pub loglik: f64,
    /// Gradient with respect to `loc ++ scale_raw`.
    pub gradient: Vec<f64>,
}

/// MC-ELBO and its reparameterized gradient at the given (frozen) noise.
/// The entropy term is exact.
pub fn elbo_at_noise(
    state: &VariationalState,
    lik: &dyn LogLikelihood,
    prior: &PriorSpec,
    noises: &[Vec<f64>],
) -> Result<ElboEvaluation> {
    if noises.is_empty() {
        return Err(CoxError::InvalidArgument("at least one MC sample required".into()));
    }
    if lik.dim() != state.dim() {
        return Err(CoxError::Dimension {
            expected: state.dim(),
            got: lik.dim(),
        });
    }
    let p = state.dim();
    let s = noises.len() as f64;
    let mut gradient = vec![0.0; state.n_params()];
    let mut sum_lik = 0.0;
    let mut sum_prior = 0.0;
    let mut g = vec![0.0; p];
    for eps in noises {
        let theta = state.transform(eps);
        let (ll, gl) = lik.value_and_gradient(&theta)?;
        let lp = log_prior(&theta, prior)?;
        let gp = log_prior_grad(&theta, prior)?;
        sum_lik += ll;
        sum_prior += lp;
        for j in 0..p {
            g[j] = (gl[j] + gp[j]) / s;
        }
        state.backprop(eps, &g, &mut gradient);
    }
    let entropy = state.entropy()?;
    for (dst, h) in gradient[p..].iter_mut().zip(state.entropy_grad()?) {
        *dst += h;
    }
    Ok(ElboEvaluation {
        elbo: (sum_lik + sum_prior) / s + entropy,
        loglik: sum_lik / s,
        gradient,
    })
}

/// MC-ELBO value for an arbitrary likelihood term.
pub fn elbo_estimate_with<R: Rng + ?Sized>(
    state: &VariationalState,
    lik: &dyn LogLikelihood,
    prior: &PriorSpec,
    rng: &mut R,
    mc_samples: usize,
) -> Result<f64> {
    let noises: Vec<Vec<f64>> = (0..mc_samples).map(|_| draw_noise(state, rng)).collect();
    if noises.is_empty() {
        return Err(CoxError::InvalidArgument("at least one MC sample required".into()));
    }
    let mut acc = 0.0;
    for eps in &noises {
        let theta = state.transform(eps);
        acc += lik.value(&theta)? + log_prior(&theta, prior)?;
    }
    Ok(acc / noises.len() as f64 + state.entropy()?)
}

pub fn elbo_estimate<R: Rng + ?Sized>(
    state: &VariationalState,
    batch: &Batch,
    prior: &PriorSpec,
    rng: &mut R,
    mc_samples: usize,
) -> Result<f64> {
    let lik = CoxLikelihood::from_batch(batch)?;
    elbo_estimate_with(state, &lik, prior, rng, mc_samples)
}

fn split_params(state: &VariationalState) -> Vec<f64> {
    let mut v = state.loc.clone();
    v.extend_from_slice(&state.scale_raw);
    v
}

fn write_params(state: &mut VariationalState, params: &[f64]) {
    let p = state.dim();
    state.loc.copy_from_slice(&params[..p]);
    state.scale_raw.copy_from_slice(&params[p..]);
}

/// One optimization step on a prepared likelihood. Updates `state` and
/// `optimizer` in place; on a non-finite gradient neither is touched.
pub fn step_with<R: Rng + ?Sized>(
    state: &mut VariationalState,
    optimizer: &mut Adam,
    lik: &dyn LogLikelihood,
    prior: &PriorSpec,
    rng: &mut R,
    mc_samples: usize,
    lr: f64,
) -> Result<TraceRecord> {
    let noises: Vec<Vec<f64>> = (0..mc_samples).map(|_| draw_noise(state, rng)).collect();
    let ev = elbo_at_noise(state, lik, prior, &noises)?;
    let grad_norm = ev.gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
    if !grad_norm.is_finite() || !ev.elbo.is_finite() {
        let bad = ev.gradient.iter().position(|g| !g.is_finite());
        return Err(CoxError::NonFinite(format!(
            "ELBO gradient at step {} (elbo={}, first bad index={bad:?})",
            optimizer.steps_taken(),
            ev.elbo
        )));
    }
    let mut params = split_params(state);
    optimizer.update(&mut params, &ev.gradient, lr);
    write_params(state, &params);
    Ok(TraceRecord {
        step: optimizer.steps_taken() as usize - 1,
        elbo: ev.elbo,
        loglik: ev.loglik,
        grad_norm,
    })
}

/// One step on a batch, using the configured sample count and base rate.
pub fn step<R: Rng + ?Sized>(
    state: &mut VariationalState,
    optimizer: &mut Adam,
    batch: &Batch,
    prior: &PriorSpec,
    rng: &mut R,
    config: &FitConfig,
) -> Result<TraceRecord> {
    let lik = CoxLikelihood::from_batch(batch)?;
    let lr = config.lr_at(optimizer.steps_taken() as usize);
    step_with(state, optimizer, &lik, prior, rng, config.mc_samples, lr)
}

/// True when the mean ELBO over the last `window` steps differs from the
/// mean over the `window` steps before it by less than `tol` (relative).
pub fn has_converged(trace: &[f64], window: usize, tol: f64) -> bool {
    if window < 2 || trace.len() < 2 * window {
        return false;
    }
    let n = trace.len();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let prev = mean(&trace[n - 2 * window..n - window]);
    let last = mean(&trace[n - window..]);
    let diff = (last - prev).abs();
    diff == 0.0 || diff / prev.abs().max(f64::MIN_POSITIVE) < tol
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub state: VariationalState,
    pub trace: Vec<TraceRecord>,
    pub totals: DatasetTotals,
    pub wall_time_secs: f64,
    pub converged_at: Option<usize>,
}

impl FitResult {
    pub fn write_trace_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.trace {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs `config.steps` SVI steps from the default initialization.
pub fn fit(source: &dyn DataSource, prior: &PriorSpec, family: Family, config: &FitConfig) -> Result<FitResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let state = init_state_with(source.totals().p, family, config.unit_diagonal, config.init_sd, &mut rng)?;
    fit_from(source, prior, state, config, &mut rng)
}

/// Runs SVI from a given initial state and random source.
pub fn fit_from(
    source: &dyn DataSource,
    prior: &PriorSpec,
    mut state: VariationalState,
    config: &FitConfig,
    rng: &mut ChaCha8Rng,
) -> Result<FitResult> {
    let started = Instant::now();
    config.validate()?;
    prior.validate()?;
    state.validate()?;
    let totals = source.totals();
    if totals.total_events == 0 {
        return Err(CoxError::NoEvents);
    }
    if state.dim() != totals.p {
        return Err(CoxError::Dimension {
            expected: totals.p,
            got: state.dim(),
        });
    }

    let mut optimizer = Adam::from_config(state.n_params(), config);
    let mut trace = Vec::with_capacity(config.steps);
    let mut elbos = Vec::with_capacity(config.steps);
    let mut converged_at = None;

    let full = match config.batch {
        BatchSpec::Full => Some(Batch::full(source)?),
        BatchSpec::Sample { .. } => None,
    };
    let full_lik = full.as_ref().map(CoxLikelihood::from_batch).transpose()?;

    for t in 0..config.steps {
        let lr = config.lr_at(t);
        let record = match (&full_lik, config.batch) {
            (Some(lik), _) => step_with(&mut state, &mut optimizer, lik, prior, rng, config.mc_samples, lr)?,
            (None, BatchSpec::Sample { mode, size }) => {
                let batch = sample_batch(source, mode, size, rng)?;
                let lik = CoxLikelihood::from_batch(&batch)?;
                step_with(&mut state, &mut optimizer, &lik, prior, rng, config.mc_samples, lr)?
            }
            (None, BatchSpec::Full) => unreachable!("full batch prepared above"),
        };
        elbos.push(record.elbo);
        trace.push(record);
        if let Some(c) = config.convergence {
            if has_converged(&elbos, c.window, c.tol) {
                converged_at = Some(t);
                break;
            }
        }
    }

    Ok(FitResult {
        state,
        trace,
        totals,
        wall_time_secs: started.elapsed().as_secs_f64(),
        converged_at,
    })
}
