//! Concordance, the subsample-likelihood study and repeated-simulation
//! coverage experiments.

use std::fmt;
use std::io::Write;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sample_batch, Batch, DataSource, IntervalRecord};
use crate::error::{CoxError, Result};
use crate::likelihood::{dot, partial_loglik, reweighted_loglik, RiskSets};
use crate::priors::PriorSpec;
use crate::simulator::{simulate_cohort, sparse_theta, SimConfig};
use crate::svi::{fit, BatchSpec, FitConfig};
use crate::variational::{marginal_summary, Family, PosteriorSummary};

/// Harrell's C over risk-set pairs: each event record is compared with every
/// other record at risk at its event time. Predictor ties count one half.
pub fn concordance(records: &[IntervalRecord], theta: &[f64]) -> Result<f64> {
    let risk = RiskSets::build(records)?;
    if risk.n_events() == 0 {
        return Err(CoxError::NoEvents);
    }
    if let Some(r) = records.iter().find(|r| r.dim() != theta.len()) {
        return Err(CoxError::Dimension {
            expected: theta.len(),
            got: r.dim(),
        });
    }
    let eta: Vec<f64> = records.iter().map(|r| dot(&r.covariates, theta)).collect();
    let (mut concordant, mut tied, mut comparable) = (0.0f64, 0.0f64, 0.0f64);
    let mut sorted = Vec::new();
    for d in 0..risk.times().len() {
        sorted.clear();
        sorted.extend(risk.members(d).iter().map(|&k| eta[k]));
        sorted.sort_by(f64::total_cmp);
        let m = sorted.len() as f64;
        for &e in risk.events_at(d) {
            let v = eta[e];
            let below = sorted.partition_point(|&x| x < v) as f64;
            let equal = sorted.partition_point(|&x| x <= v) as f64 - below;
            concordant += below;
            // the event itself is among the equal values
            tied += equal - 1.0;
            comparable += m - 1.0;
        }
    }
    if comparable == 0.0 {
        return Err(CoxError::InvalidArgument("no comparable pairs".into()));
    }
    Ok((concordant + 0.5 * tied) / comparable)
}

/// Distribution of subsample log-likelihood approximations around the full
/// partial log-likelihood at a fixed θ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReweightingStudy {
    pub full_loglik: f64,
    pub reweighted: Vec<f64>,
    /// Batch partial log-likelihood times the sampling ratio.
    pub naive: Vec<f64>,
    pub mean: f64,
    pub median: f64,
    pub sd: f64,
    pub relative_bias: f64,
    pub naive_mean: f64,
    pub naive_relative_bias: f64,
}

// shifted by the first value so that a constant sample has an exact mean
fn mean(xs: &[f64]) -> f64 {
    let x0 = xs[0];
    x0 + xs.iter().map(|x| x - x0).sum::<f64>() / xs.len() as f64
}

fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn reweighting_study<R: Rng + ?Sized>(
    source: &dyn DataSource,
    theta: &[f64],
    batch: BatchSpec,
    n_batches: usize,
    rng: &mut R,
) -> Result<ReweightingStudy> {
    if n_batches == 0 {
        return Err(CoxError::InvalidArgument("n_batches must be at least 1".into()));
    }
    let all = source.fetch_all()?;
    let full_loglik = partial_loglik(&all, theta)?.loglik;
    let batches: Vec<Batch> = match batch {
        BatchSpec::Full => {
            let b = Batch::unweighted(all)?;
            vec![b; n_batches]
        }
        BatchSpec::Sample { mode, size } => (0..n_batches)
            .map(|_| sample_batch(source, mode, size, rng))
            .collect::<Result<_>>()?,
    };
    let pairs: Vec<(f64, f64)> = batches
        .par_iter()
        .map(|b| {
            let rw = reweighted_loglik(b, theta)?.loglik;
            let naive = b.w2 * partial_loglik(&b.records, theta)?.loglik;
            Ok((rw, naive))
        })
        .collect::<Result<_>>()?;
    let (reweighted, naive): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let m = mean(&reweighted);
    let nm = mean(&naive);
    Ok(ReweightingStudy {
        full_loglik,
        mean: m,
        median: median(&reweighted),
        sd: sample_sd(&reweighted),
        relative_bias: (m - full_loglik) / full_loglik.abs(),
        naive_mean: nm,
        naive_relative_bias: (nm - full_loglik) / full_loglik.abs(),
        reweighted,
        naive,
    })
}

impl ReweightingStudy {
    /// One row per batch, for plotting.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["batch", "reweighted", "naive", "full"])?;
        for (i, (r, n)) in self.reweighted.iter().zip(&self.naive).enumerate() {
            w.write_record([i.to_string(), r.to_string(), n.to_string(), self.full_loglik.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

impl fmt::Display for ReweightingStudy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "full log-likelihood   {:>14.4}", self.full_loglik)?;
        writeln!(f, "batches               {:>14}", self.reweighted.len())?;
        writeln!(f, "reweighted mean       {:>14.4}", self.mean)?;
        writeln!(f, "reweighted median     {:>14.4}", self.median)?;
        writeln!(f, "reweighted sd         {:>14.4}", self.sd)?;
        writeln!(f, "relative bias         {:>14.6}", self.relative_bias)?;
        writeln!(f, "naive mean            {:>14.4}", self.naive_mean)?;
        write!(f, "naive relative bias   {:>14.6}", self.naive_relative_bias)
    }
}

/// One completed run: the truth it was simulated from and the fitted summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub theta_true: Vec<f64>,
    pub summary: PosteriorSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub name: String,
    pub true_value: f64,
    pub mean_estimate: f64,
    pub sd_estimate: f64,
    pub bias: f64,
    pub rmse: f64,
    pub mean_hpd_width: f64,
    pub coverage: f64,
    pub identified_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub level: f64,
    pub runs: usize,
    pub failed_runs: usize,
    pub rows: Vec<CoverageRow>,
}

impl CoverageReport {
    pub fn from_outcomes(outcomes: &[RunOutcome], failed_runs: usize) -> Result<Self> {
        let first = outcomes
            .first()
            .ok_or_else(|| CoxError::InvalidArgument("no successful runs to aggregate".into()))?;
        let p = first.theta_true.len();
        let level = first.summary.level;
        for o in outcomes {
            if o.theta_true.len() != p || o.summary.coefficients.len() != p {
                return Err(CoxError::Dimension {
                    expected: p,
                    got: o.summary.coefficients.len(),
                });
            }
        }
        let n = outcomes.len() as f64;
        let rows = (0..p)
            .map(|j| {
                let est: Vec<f64> = outcomes.iter().map(|o| o.summary.coefficients[j].mean).collect();
                let truth: Vec<f64> = outcomes.iter().map(|o| o.theta_true[j]).collect();
                let err: Vec<f64> = est.iter().zip(&truth).map(|(e, t)| e - t).collect();
                let count = |f: &dyn Fn(&RunOutcome) -> bool| outcomes.iter().filter(|o| f(o)).count() as f64 / n;
                CoverageRow {
                    name: first.summary.coefficients[j].name.clone(),
                    true_value: mean(&truth),
                    mean_estimate: mean(&est),
                    sd_estimate: sample_sd(&est),
                    bias: mean(&err),
                    rmse: (err.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
                    mean_hpd_width: outcomes
                        .iter()
                        .map(|o| o.summary.coefficients[j].hpd_high - o.summary.coefficients[j].hpd_low)
                        .sum::<f64>()
                        / n,
                    coverage: count(&|o| o.summary.coefficients[j].contains(o.theta_true[j])),
                    identified_rate: count(&|o| o.summary.coefficients[j].excludes_zero()),
                }
            })
            .collect();
        Ok(Self {
            level,
            runs: outcomes.len(),
            failed_runs,
            rows,
        })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

impl fmt::Display for CoverageReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} runs ({} failed), level {}",
            self.runs, self.failed_runs, self.level
        )?;
        writeln!(
            f,
            "{:<8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>9} {:>8}",
            "name", "true", "mean", "sd", "bias", "rmse", "hpd_width", "coverage"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<8} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>9.3} {:>8.3}",
                r.name, r.true_value, r.mean_estimate, r.sd_estimate, r.bias, r.rmse, r.mean_hpd_width, r.coverage
            )?;
        }
        Ok(())
    }
}

/// Identification of non-zero coefficients pooled over runs: a coefficient
/// is flagged when its interval excludes zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentificationReport {
    pub strong_threshold: f64,
    pub n_strong: usize,
    pub strong_flagged: usize,
    pub n_zero: usize,
    pub zero_flagged: usize,
    pub strong_rate: f64,
    pub false_flag_rate: f64,
}

impl IdentificationReport {
    pub fn from_outcomes(outcomes: &[RunOutcome], strong_threshold: f64) -> Self {
        let (mut n_strong, mut strong_flagged, mut n_zero, mut zero_flagged) = (0, 0, 0, 0);
        for o in outcomes {
            for (t, c) in o.theta_true.iter().zip(&o.summary.coefficients) {
                if *t == 0.0 {
                    n_zero += 1;
                    zero_flagged += usize::from(c.excludes_zero());
                } else if t.abs() >= strong_threshold {
                    n_strong += 1;
                    strong_flagged += usize::from(c.excludes_zero());
                }
            }
        }
        let rate = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Self {
            strong_threshold,
            n_strong,
            strong_flagged,
            n_zero,
            zero_flagged,
            strong_rate: rate(strong_flagged, n_strong),
            false_flag_rate: rate(zero_flagged, n_zero),
        }
    }
}

/// Redraw a sparse coefficient vector for every run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparseTruth {
    pub n_nonzero: usize,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub sim: SimConfig,
    pub prior: PriorSpec,
    pub family: Family,
    pub fit: FitConfig,
    pub runs: usize,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub sparse_truth: Option<SparseTruth>,
}

fn default_level() -> f64 {
    0.95
}

/// Seeds for the simulation and the fit of run `run`.
pub fn run_seeds(seed: u64, run: usize) -> (u64, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run as u64);
    (rng.next_u64(), rng.next_u64())
}

/// Simulate, fit and summarize one run.
pub fn run_once(spec: &ExperimentSpec, run: usize) -> Result<RunOutcome> {
    let (sim_seed, fit_seed) = run_seeds(spec.seed, run);
    let mut sim = spec.sim.clone();
    sim.seed = sim_seed;
    if let Some(s) = spec.sparse_truth {
        let mut rng = ChaCha8Rng::seed_from_u64(sim_seed ^ 0x5eed);
        sim.theta_true = sparse_theta(sim.n_binary, sim.n_continuous, s.n_nonzero, s.sd, &mut rng);
    }
    let truth = simulate_cohort(&sim)?;
    let mut fit_config = spec.fit.clone();
    fit_config.seed = fit_seed;
    let result = fit(&truth.dataset, &spec.prior, spec.family, &fit_config)?;
    let summary = marginal_summary(&result.state, truth.dataset.covariate_names(), spec.level)?;
    Ok(RunOutcome {
        theta_true: truth.theta_true,
        summary,
    })
}

/// Runs are independent and executed in parallel; results are aggregated in
/// run order. Failed runs are logged, counted and excluded.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<(Vec<RunOutcome>, usize)> {
    if spec.runs == 0 {
        return Err(CoxError::InvalidArgument("runs must be at least 1".into()));
    }
    let results: Vec<Result<RunOutcome>> = (0..spec.runs).into_par_iter().map(|r| run_once(spec, r)).collect();
    let mut outcomes = Vec::with_capacity(spec.runs);
    let mut failed = 0;
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(o) => outcomes.push(o),
            Err(e) => {
                log::warn!("run {r} failed: {e}");
                failed += 1;
            }
        }
    }
    Ok((outcomes, failed))
}

pub fn coverage_experiment(spec: &ExperimentSpec) -> Result<CoverageReport> {
    let (outcomes, failed) = run_experiment(spec)?;
    CoverageReport::from_outcomes(&outcomes, failed)
}
