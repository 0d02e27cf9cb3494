//! Discrete-time cohort simulator with known coefficients.
//!
//! The baseline hazard and every covariate are step functions drawn from
//! renewal-reward processes on an integer day grid. Each individual is
//! followed from day 1 to a uniform censoring day; on each day the event
//! probability is `σ(logit α₀(t) + θᵀX(t))`. Output rows are split at
//! covariate jumps, so each row carries the covariate values in force on
//! its `(start, stop]` interval.
//!
//! Covariate jumps are predictable: a jump at day `J` applies from day
//! `J + 1`, matching the row `(J, next]` that carries the new values.
//! Baseline jumps apply on the jump day itself and do not create rows.
//!
//! Within a stretch of days where both the baseline and the covariates are
//! constant, the first event day is drawn from the geometric law directly,
//! which has the same distribution as one Bernoulli trial per day.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Gamma, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, IntervalRecord};
use crate::error::{CoxError, Result};

pub const HAZARD_FLOOR: f64 = 1e-12;
pub const HAZARD_CEIL: f64 = 1.0 - 1e-12;

/// Gamma law in shape–scale form (mean `shape * scale`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaLaw {
    pub shape: f64,
    pub scale: f64,
}

impl GammaLaw {
    pub const fn new(shape: f64, scale: f64) -> Self {
        Self { shape, scale }
    }

    fn dist(&self) -> Result<Gamma<f64>> {
        if !(self.shape > 0.0 && self.scale > 0.0) {
            return Err(CoxError::InvalidArgument(format!("invalid gamma law {self:?}")));
        }
        Gamma::new(self.shape, self.scale).map_err(|e| CoxError::InvalidArgument(e.to_string()))
    }

    pub fn mean(&self) -> f64 {
        self.shape * self.scale
    }

    pub fn variance(&self) -> f64 {
        self.shape * self.scale * self.scale
    }
}

/// Reward whose sign and law depend on the jump time: the first segment
/// with `jump_time <= until` applies; `until = None` matches anything.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSegment {
    pub until: Option<f64>,
    pub sign: f64,
    pub law: GammaLaw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardLaw {
    Normal { mean: f64, sd: f64 },
    Bernoulli { q: f64 },
    Schedule { segments: Vec<ScheduleSegment> },
}

impl RewardLaw {
    fn validate(&self) -> Result<()> {
        let ok = match self {
            RewardLaw::Normal { sd, .. } => *sd >= 0.0,
            RewardLaw::Bernoulli { q } => (0.0..=1.0).contains(q),
            RewardLaw::Schedule { segments } => {
                let thresholds: Vec<f64> = segments.iter().filter_map(|s| s.until).collect();
                !segments.is_empty()
                    && thresholds.windows(2).all(|w| w[0] < w[1])
                    && segments.iter().all(|s| s.law.dist().is_ok())
            }
        };
        if ok {
            Ok(())
        } else {
            Err(CoxError::InvalidArgument(format!("invalid reward law {self:?}")))
        }
    }

    fn draw<R: Rng + ?Sized>(&self, jump_time: f64, rng: &mut R) -> f64 {
        match self {
            RewardLaw::Normal { mean, sd } => Normal::new(*mean, *sd).expect("validated").sample(rng),
            RewardLaw::Bernoulli { q } => {
                if Bernoulli::new(*q).expect("validated").sample(rng) {
                    1.0
                } else {
                    0.0
                }
            }
            RewardLaw::Schedule { segments } => {
                let seg = segments
                    .iter()
                    .find(|s| s.until.is_none_or(|u| jump_time <= u))
                    .unwrap_or_else(|| segments.last().expect("non-empty schedule"));
                seg.sign * seg.law.dist().expect("validated").sample(rng)
            }
        }
    }
}

/// Renewal-reward process: waiting times drawn from `waiting` and rounded to
/// whole days (a zero wait becomes one day), a reward at every jump. With
/// `cumulative` the path is the running sum of rewards; otherwise each
/// reward replaces the previous value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenewalRewardSpec {
    pub waiting: GammaLaw,
    pub reward: RewardLaw,
    pub cumulative: bool,
}

impl RenewalRewardSpec {
    /// Baseline-hazard schedule: rising quickly until day 15000, faster
    /// until 25000, then falling.
    pub fn default_baseline() -> Self {
        Self {
            waiting: GammaLaw::new(4.0, 200.0),
            reward: RewardLaw::Schedule {
                segments: vec![
                    ScheduleSegment {
                        until: Some(15000.0),
                        sign: 1.0,
                        law: GammaLaw::new(2.0, 1.0),
                    },
                    ScheduleSegment {
                        until: Some(25000.0),
                        sign: 1.0,
                        law: GammaLaw::new(1.0, 10.0),
                    },
                    ScheduleSegment {
                        until: None,
                        sign: -1.0,
                        law: GammaLaw::new(1.0, 5.0),
                    },
                ],
            },
            cumulative: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.waiting.dist()?;
        self.reward.validate()
    }
}

/// Right-continuous step function on days; zero before the first jump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepPath {
    pub jumps: Vec<f64>,
    pub values: Vec<f64>,
}

impl StepPath {
    pub fn value_at(&self, t: f64) -> f64 {
        let k = self.jumps.partition_point(|&j| j <= t);
        if k == 0 {
            0.0
        } else {
            self.values[k - 1]
        }
    }
}

fn waiting_days<R: Rng + ?Sized>(law: &Gamma<f64>, rng: &mut R) -> f64 {
    law.sample(rng).round().max(1.0)
}

pub fn sample_renewal_reward<R: Rng + ?Sized>(spec: &RenewalRewardSpec, horizon: f64, rng: &mut R) -> Result<StepPath> {
    if horizon < 1.0 {
        return Err(CoxError::InvalidArgument(format!("horizon {horizon} < 1")));
    }
    spec.validate()?;
    let waiting = spec.waiting.dist()?;
    let mut path = StepPath {
        jumps: Vec::new(),
        values: Vec::new(),
    };
    let mut t = 0.0;
    let mut value = 0.0;
    loop {
        t += waiting_days(&waiting, rng);
        if t > horizon {
            break;
        }
        let r = spec.reward.draw(t, rng);
        value = if spec.cumulative { value + r } else { r };
        path.jumps.push(t);
        path.values.push(value);
    }
    Ok(path)
}

/// Baseline hazard: a raw step path times `scale`, clamped into (0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardPath {
    pub raw: StepPath,
    pub scale: f64,
}

impl HazardPath {
    pub fn constant(q: f64) -> Self {
        Self {
            raw: StepPath {
                jumps: vec![0.0],
                values: vec![q],
            },
            scale: 1.0,
        }
    }

    pub fn value_at(&self, t: f64) -> f64 {
        (self.raw.value_at(t) * self.scale).clamp(HAZARD_FLOOR, HAZARD_CEIL)
    }

    pub fn jumps(&self) -> &[f64] {
        &self.raw.jumps
    }
}

pub fn build_baseline<R: Rng + ?Sized>(
    spec: &RenewalRewardSpec,
    horizon: f64,
    hazard_scale: f64,
    rng: &mut R,
) -> Result<HazardPath> {
    if !(hazard_scale > 0.0 && hazard_scale.is_finite()) {
        return Err(CoxError::InvalidArgument(format!("hazard_scale {hazard_scale} must be positive")));
    }
    Ok(HazardPath {
        raw: sample_renewal_reward(spec, horizon, rng)?,
        scale: hazard_scale,
    })
}

fn logit(p: f64) -> f64 {
    p.ln() - (-p).ln_1p()
}

/// Discrete proportional-odds event probability `σ(logit α₀ + η)`.
pub fn event_probability(alpha0: f64, eta: f64) -> f64 {
    let z = logit(alpha0) + eta;
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Covariate processes of one individual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateSpec {
    pub waiting: GammaLaw,
    pub binary: RewardLaw,
    pub continuous: RewardLaw,
    /// Running-sum rewards instead of replacement.
    pub cumulative: bool,
    /// All covariates of an individual jump together (one renewal clock);
    /// otherwise each covariate has its own clock.
    pub shared_jumps: bool,
}

impl Default for CovariateSpec {
    fn default() -> Self {
        Self {
            waiting: GammaLaw::new(4.0, 500.0),
            binary: RewardLaw::Bernoulli { q: 0.2 },
            continuous: RewardLaw::Normal { mean: 0.0, sd: 1.0 },
            cumulative: false,
            shared_jumps: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformLaw {
    pub low: f64,
    pub high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub n_individuals: usize,
    pub horizon: f64,
    /// Binary-covariate coefficients first, then continuous ones.
    pub theta_true: Vec<f64>,
    pub n_binary: usize,
    pub n_continuous: usize,
    pub covariates: CovariateSpec,
    pub baseline: RenewalRewardSpec,
    pub hazard_scale: f64,
    pub censoring: UniformLaw,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self::standard_case()
    }
}

impl SimConfig {
    /// 1000 individuals, 3 binary + 3 continuous covariates,
    /// θ = (−0.9, 0.2, 0, −0.4, 1.1, 0).
    pub fn standard_case() -> Self {
        Self {
            n_individuals: 1000,
            horizon: 30000.0,
            theta_true: vec![-0.9, 0.2, 0.0, -0.4, 1.1, 0.0],
            n_binary: 3,
            n_continuous: 3,
            covariates: CovariateSpec::default(),
            baseline: RenewalRewardSpec::default_baseline(),
            hazard_scale: 1e-6,
            censoring: UniformLaw {
                low: 1000.0,
                high: 30000.0,
            },
            seed: 0,
        }
    }

    pub fn p(&self) -> usize {
        self.n_binary + self.n_continuous
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta_true.len() != self.p() {
            return Err(CoxError::Dimension {
                expected: self.p(),
                got: self.theta_true.len(),
            });
        }
        if self.p() == 0 {
            return Err(CoxError::InvalidArgument("at least one covariate required".into()));
        }
        if !(self.censoring.low >= 1.0 && self.censoring.low <= self.censoring.high) {
            return Err(CoxError::InvalidArgument("censoring bounds must satisfy 1 <= low <= high".into()));
        }
        if !(self.hazard_scale > 0.0 && self.hazard_scale.is_finite()) {
            return Err(CoxError::InvalidArgument("hazard_scale must be positive".into()));
        }
        if self.theta_true.iter().any(|t| !t.is_finite()) {
            return Err(CoxError::NonFinite("theta_true".into()));
        }
        self.baseline.validate()?;
        self.covariates.binary.validate()?;
        self.covariates.continuous.validate()?;
        self.covariates.waiting.dist()?;
        Ok(())
    }

    pub fn covariate_names(&self) -> Vec<String> {
        (1..=self.p()).map(|j| format!("X{j}")).collect()
    }

    fn reward_law(&self, j: usize) -> &RewardLaw {
        if j < self.n_binary {
            &self.covariates.binary
        } else {
            &self.covariates.continuous
        }
    }
}

/// Random stream for one individual; stream 0 is reserved for the baseline.
pub fn individual_rng(seed: u64, individual_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(individual_id.wrapping_add(1));
    rng
}

fn baseline_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    rng
}

/// Jump days and the covariate vector in force after each jump.
struct CovariatePath {
    jumps: Vec<f64>,
    values: Vec<Vec<f64>>,
}

fn sample_covariates<R: Rng + ?Sized>(config: &SimConfig, horizon: f64, rng: &mut R) -> Result<CovariatePath> {
    let p = config.p();
    let spec = &config.covariates;
    if spec.shared_jumps {
        let waiting = spec.waiting.dist()?;
        let mut jumps = Vec::new();
        let mut values: Vec<Vec<f64>> = Vec::new();
        let mut current = vec![0.0; p];
        let mut t = 0.0;
        loop {
            t += waiting_days(&waiting, rng);
            if t > horizon {
                break;
            }
            for (j, v) in current.iter_mut().enumerate() {
                let r = config.reward_law(j).draw(t, rng);
                *v = if spec.cumulative { *v + r } else { r };
            }
            jumps.push(t);
            values.push(current.clone());
        }
        return Ok(CovariatePath { jumps, values });
    }

    let paths = (0..p)
        .map(|j| {
            let s = RenewalRewardSpec {
                waiting: spec.waiting,
                reward: config.reward_law(j).clone(),
                cumulative: spec.cumulative,
            };
            sample_renewal_reward(&s, horizon, rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut jumps: Vec<f64> = paths.iter().flat_map(|p| p.jumps.iter().copied()).collect();
    jumps.sort_by(f64::total_cmp);
    jumps.dedup();
    let values = jumps
        .iter()
        .map(|&t| paths.iter().map(|path| path.value_at(t)).collect())
        .collect();
    Ok(CovariatePath { jumps, values })
}

/// First success day in `1..=len` for a per-day probability `p`, or `None`.
fn first_success<R: Rng + ?Sized>(p: f64, len: f64, rng: &mut R) -> Option<f64> {
    let u: f64 = 1.0 - rng.random::<f64>();
    if p >= 1.0 {
        return Some(1.0);
    }
    let k = (u.ln() / (-p).ln_1p()).ceil().max(1.0);
    (k <= len).then_some(k)
}

/// Simulates one individual against a fixed baseline.
pub fn simulate_individual<R: Rng + ?Sized>(
    config: &SimConfig,
    baseline: &HazardPath,
    individual_id: u64,
    rng: &mut R,
) -> Result<Vec<IntervalRecord>> {
    let c = rng
        .random_range(config.censoring.low..=config.censoring.high)
        .round()
        .min(config.horizon.floor())
        .max(1.0);
    let covs = sample_covariates(config, c, rng)?;
    let x_on_day = |day: f64| -> &[f64] {
        // value after jumps strictly before `day`
        let k = covs.jumps.partition_point(|&j| j < day);
        if k == 0 {
            &[]
        } else {
            &covs.values[k - 1]
        }
    };

    let mut starts: Vec<f64> = vec![1.0];
    starts.extend(baseline.jumps().iter().copied().filter(|&j| j > 1.0 && j <= c));
    starts.extend(covs.jumps.iter().map(|&j| j + 1.0).filter(|&d| d <= c));
    starts.sort_by(f64::total_cmp);
    starts.dedup();

    let mut event_day = None;
    for (i, &a) in starts.iter().enumerate() {
        let b = starts.get(i + 1).map_or(c, |next| next - 1.0);
        let x = x_on_day(a);
        let eta = if x.is_empty() {
            0.0
        } else {
            x.iter().zip(&config.theta_true).map(|(x, t)| x * t).sum()
        };
        let prob = event_probability(baseline.value_at(a), eta);
        if let Some(k) = first_success(prob, b - a + 1.0, rng) {
            event_day = Some(a + k - 1.0);
            break;
        }
    }

    let end = event_day.unwrap_or(c);
    let p = config.p();
    let mut records = Vec::new();
    let mut start = 0.0;
    let mut current = vec![0.0; p];
    for (j, &jump) in covs.jumps.iter().enumerate() {
        if jump >= end {
            break;
        }
        records.push(IntervalRecord::new(individual_id, start, jump, false, current.clone()));
        start = jump;
        current.clone_from(&covs.values[j]);
    }
    records.push(IntervalRecord::new(individual_id, start, end, event_day.is_some(), current));
    Ok(records)
}

#[derive(Debug, Clone)]
pub struct CohortTruth {
    pub dataset: Dataset,
    pub theta_true: Vec<f64>,
    pub censorship: f64,
    pub tie_fraction: f64,
    pub baseline: HazardPath,
}

/// Sidecar describing a simulated cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSummary {
    pub theta_true: Vec<f64>,
    pub n_individuals: usize,
    pub n_observations: usize,
    pub n_events: usize,
    pub censorship: f64,
    pub tie_fraction: f64,
    pub config: SimConfig,
}

impl CohortTruth {
    pub fn summary(&self, config: &SimConfig) -> TruthSummary {
        use crate::data::DataSource;
        let t = self.dataset.totals();
        TruthSummary {
            theta_true: self.theta_true.clone(),
            n_individuals: t.n_individuals,
            n_observations: t.n_observations,
            n_events: t.total_events,
            censorship: self.censorship,
            tie_fraction: self.tie_fraction,
            config: config.clone(),
        }
    }
}

/// Fraction of events that share their day with at least one other event.
pub fn tie_fraction(records: &[IntervalRecord]) -> f64 {
    let mut days: Vec<f64> = records.iter().filter(|r| r.event).map(|r| r.stop).collect();
    if days.is_empty() {
        return 0.0;
    }
    days.sort_by(f64::total_cmp);
    let n = days.len();
    let tied = (0..n)
        .filter(|&i| (i > 0 && days[i - 1] == days[i]) || (i + 1 < n && days[i + 1] == days[i]))
        .count();
    tied as f64 / n as f64
}

/// Simulates `config.n_individuals` independent individuals (ids `1..=n`)
/// against one baseline draw. Deterministic in `config.seed` regardless of
/// thread count.
pub fn simulate_cohort(config: &SimConfig) -> Result<CohortTruth> {
    config.validate()?;
    let baseline = build_baseline(&config.baseline, config.horizon, config.hazard_scale, &mut baseline_rng(config.seed))?;
    simulate_cohort_with(config, baseline)
}

pub fn simulate_cohort_with(config: &SimConfig, baseline: HazardPath) -> Result<CohortTruth> {
    config.validate()?;
    let per_individual: Vec<Vec<IntervalRecord>> = (1..=config.n_individuals as u64)
        .into_par_iter()
        .map(|id| simulate_individual(config, &baseline, id, &mut individual_rng(config.seed, id)))
        .collect::<Result<_>>()?;
    let records: Vec<IntervalRecord> = per_individual.into_iter().flatten().collect();
    let events = records.iter().filter(|r| r.event).count();
    let censorship = if config.n_individuals == 0 {
        0.0
    } else {
        1.0 - events as f64 / config.n_individuals as f64
    };
    let ties = tie_fraction(&records);
    Ok(CohortTruth {
        dataset: Dataset::new(records, config.covariate_names())?,
        theta_true: config.theta_true.clone(),
        censorship,
        tie_fraction: ties,
        baseline,
    })
}

/// Bisects `hazard_scale` on a log scale so that a pilot cohort of
/// `pilot_n` individuals (same seed, so censorship is monotone in the scale)
/// reaches `target_censorship`.
pub fn calibrate_hazard_scale(config: &SimConfig, target_censorship: f64, pilot_n: usize) -> Result<f64> {
    if !(0.0..1.0).contains(&target_censorship) || pilot_n == 0 {
        return Err(CoxError::InvalidArgument("target censorship must be in [0, 1) with a non-empty pilot".into()));
    }
    let mut pilot = config.clone();
    pilot.n_individuals = pilot_n;
    let censorship_at = |log_scale: f64| -> Result<f64> {
        let mut c = pilot.clone();
        c.hazard_scale = log_scale.exp();
        Ok(simulate_cohort(&c)?.censorship)
    };
    let (mut lo, mut hi) = ((1e-12f64).ln(), (1e-1f64).ln());
    if censorship_at(hi)? > target_censorship || censorship_at(lo)? < target_censorship {
        return Err(CoxError::InvalidArgument(format!(
            "target censorship {target_censorship} not reachable for hazard scales in [1e-12, 1e-1]"
        )));
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if censorship_at(mid)? > target_censorship {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}

/// Coefficient vector with `n_nonzero` leading Normal(0, sd²) entries,
/// split evenly between the binary and continuous blocks, and zeros
/// elsewhere.
pub fn sparse_theta<R: Rng + ?Sized>(n_binary: usize, n_continuous: usize, n_nonzero: usize, sd: f64, rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, sd).expect("valid sd");
    let mut theta = vec![0.0; n_binary + n_continuous];
    let half = n_nonzero / 2;
    let (nb, nc) = if n_binary == 0 {
        (0, n_nonzero)
    } else if n_continuous == 0 {
        (n_nonzero, 0)
    } else {
        (half.min(n_binary), (n_nonzero - half).min(n_continuous))
    };
    for t in theta.iter_mut().take(nb) {
        *t = normal.sample(rng);
    }
    for t in theta[n_binary..].iter_mut().take(nc) {
        *t = normal.sample(rng);
    }
    theta
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{validate, DataSource};

    fn small_config(n: usize, seed: u64) -> SimConfig {
        SimConfig {
            n_individuals: n,
            seed,
            hazard_scale: 2e-6,
            ..SimConfig::standard_case()
        }
    }

    #[test]
    fn event_probability_values() {
        assert!((event_probability(0.5, 0.0) - 0.5).abs() < 1e-15);
        assert!((event_probability(0.5, 3f64.ln()) - 0.75).abs() < 1e-15);
        assert!(event_probability(0.5, -800.0) < 1e-300);
        assert_eq!(event_probability(0.5, 800.0), 1.0);
        let mut prev = 0.0;
        for i in -50..50 {
            let p = event_probability(0.01, i as f64 * 0.3);
            assert!(p > prev);
            prev = p;
        }
    }

    #[test]
    fn long_first_wait_gives_zero_path() {
        let spec = RenewalRewardSpec {
            waiting: GammaLaw::new(400.0, 1000.0),
            reward: RewardLaw::Normal { mean: 0.0, sd: 1.0 },
            cumulative: true,
        };
        let path = sample_renewal_reward(&spec, 1000.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(path.jumps.is_empty());
        assert_eq!(path.value_at(500.0), 0.0);
    }

    #[test]
    fn jump_count_matches_renewal_theory() {
        let spec = RenewalRewardSpec {
            waiting: GammaLaw::new(4.0, 500.0),
            reward: RewardLaw::Normal { mean: 0.0, sd: 1.0 },
            cumulative: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 1000;
        let total: usize = (0..n)
            .map(|_| sample_renewal_reward(&spec, 28000.0, &mut rng).unwrap().jumps.len())
            .sum();
        let mean = total as f64 / n as f64;
        assert!((mean - 14.0).abs() < 1.4, "mean jumps {mean}");
    }

    #[test]
    fn bernoulli_reward_fraction() {
        let spec = RenewalRewardSpec {
            waiting: GammaLaw::new(1.0, 10.0),
            reward: RewardLaw::Bernoulli { q: 0.2 },
            cumulative: false,
        };
        let path = sample_renewal_reward(&spec, 1e6, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let n = path.values.len() as f64;
        let frac = path.values.iter().sum::<f64>() / n;
        let se = (0.2 * 0.8 / n).sqrt();
        assert!((frac - 0.2).abs() < 3.0 * se, "{frac} over {n}");
    }

    #[test]
    fn baseline_clamp_and_shape() {
        let zero = HazardPath {
            raw: StepPath {
                jumps: vec![],
                values: vec![],
            },
            scale: 1.0,
        };
        assert_eq!(zero.value_at(100.0), HAZARD_FLOOR);
        let b = build_baseline(
            &RenewalRewardSpec::default_baseline(),
            30000.0,
            1e-5,
            &mut ChaCha8Rng::seed_from_u64(4),
        )
        .unwrap();
        let mut prev = 0.0;
        for t in (0..=15000).step_by(50) {
            let v = b.raw.value_at(t as f64);
            assert!(v >= prev);
            prev = v;
        }
        assert!(build_baseline(&RenewalRewardSpec::default_baseline(), 10.0, 0.0, &mut ChaCha8Rng::seed_from_u64(4)).is_err());
    }

    #[test]
    fn vanishing_hazard_censors() {
        let config = small_config(1, 1);
        let floor = HazardPath {
            raw: StepPath {
                jumps: vec![],
                values: vec![],
            },
            scale: 1.0,
        };
        let mut cfg = config.clone();
        cfg.theta_true = vec![0.0; 6];
        let recs = simulate_individual(&cfg, &floor, 7, &mut individual_rng(1, 7)).unwrap();
        assert!(recs.iter().all(|r| !r.event));
        assert!(recs.last().unwrap().stop >= 1000.0);
    }

    #[test]
    fn certain_event_on_day_one() {
        let mut cfg = small_config(1, 1);
        cfg.theta_true = vec![0.0; 6];
        let sure = HazardPath::constant(1.0);
        let recs = simulate_individual(&cfg, &sure, 3, &mut individual_rng(1, 3)).unwrap();
        assert_eq!(recs, vec![IntervalRecord::new(3, 0.0, 1.0, true, vec![0.0; 6])]);
    }

    #[test]
    fn rows_have_table_shape() {
        let truth = simulate_cohort(&small_config(200, 5)).unwrap();
        let recs = truth.dataset.records();
        assert!(validate(recs).is_empty());
        for g in 0..truth.dataset.totals().n_individuals {
            let rows = truth.dataset.individual_rows(g);
            let first = &recs[rows[0]];
            assert_eq!(first.start, 0.0);
            assert!(first.covariates.iter().all(|&v| v == 0.0));
            for w in rows.windows(2) {
                assert_eq!(recs[w[0]].stop, recs[w[1]].start);
                assert!(recs[w[1]].stop > recs[w[0]].stop);
            }
            // binary columns stay binary
            for &r in rows {
                for j in 0..3 {
                    let v = recs[r].covariates[j];
                    assert!(v == 0.0 || v == 1.0);
                }
            }
        }
    }

    #[test]
    fn cohort_is_deterministic() {
        let a = simulate_cohort(&small_config(100, 9)).unwrap();
        let b = simulate_cohort(&small_config(100, 9)).unwrap();
        assert_eq!(a.dataset.records(), b.dataset.records());
        let c = simulate_cohort(&small_config(100, 10)).unwrap();
        assert_ne!(a.dataset.records(), c.dataset.records());
    }

    #[test]
    fn empty_cohort() {
        let t = simulate_cohort(&small_config(0, 1)).unwrap();
        assert_eq!(t.dataset.totals().n_observations, 0);
    }

    #[test]
    fn geometric_rate_under_constant_hazard() {
        let q = 2e-4;
        let mut cfg = small_config(4000, 11);
        cfg.theta_true = vec![0.0; 6];
        let truth = simulate_cohort_with(&cfg, HazardPath::constant(q)).unwrap();
        let recs = truth.dataset.records();
        let at_risk_days: f64 = recs.iter().map(|r| r.stop - r.start).sum();
        let events = recs.iter().filter(|r| r.event).count() as f64;
        let rate = events / at_risk_days;
        let se = (q * (1.0 - q) / at_risk_days).sqrt();
        assert!((rate - q).abs() < 3.0 * se, "rate {rate} vs {q}");
    }

    #[test]
    fn positive_coefficient_raises_event_rate() {
        let mut lo = small_config(1500, 12);
        lo.theta_true = vec![0.0, 0.0, 0.0, 0.0, 0.3, 0.0];
        lo.covariates.continuous = RewardLaw::Normal { mean: 1.0, sd: 0.5 };
        let mut hi = lo.clone();
        hi.theta_true[4] = 0.9;
        let a = simulate_cohort(&lo).unwrap();
        let b = simulate_cohort(&hi).unwrap();
        assert!(b.censorship <= a.censorship, "{} vs {}", b.censorship, a.censorship);
    }

    #[test]
    fn ties_counted() {
        let recs = vec![
            IntervalRecord::new(1, 0.0, 5.0, true, vec![]),
            IntervalRecord::new(2, 0.0, 5.0, true, vec![]),
            IntervalRecord::new(3, 0.0, 6.0, true, vec![]),
            IntervalRecord::new(4, 0.0, 5.0, false, vec![]),
        ];
        assert!((tie_fraction(&recs) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn calibration_hits_target() {
        let mut cfg = small_config(1000, 13);
        cfg.theta_true = vec![0.0; 6];
        let scale = calibrate_hazard_scale(&cfg, 0.9, 1000).unwrap();
        cfg.hazard_scale = scale;
        let c = simulate_cohort(&cfg).unwrap().censorship;
        assert!((c - 0.9).abs() <= 0.02, "censorship {c} at scale {scale}");
    }

    #[test]
    fn config_validation() {
        let mut cfg = SimConfig::standard_case();
        cfg.theta_true.pop();
        assert!(simulate_cohort(&cfg).is_err());
    }

    #[test]
    fn sparse_theta_layout() {
        let t = sparse_theta(10, 10, 6, 0.75, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(t.iter().filter(|v| **v != 0.0).count(), 6);
        assert!(t[3..10].iter().all(|v| *v == 0.0));
        assert!(t[13..].iter().all(|v| *v == 0.0));
    }
}
