//! Cox partial log-likelihood on counting-process records, with Breslow
//! handling of tied event times, and its subsample-reweighted variant.
//!
//! For a batch with event weight `w1` and risk-set weight `w2`:
//!
//! ```text
//! loglik = w1 * Σ_e [ θᵀx_e − log( w2 * Σ_{k at risk at t_e} exp(θᵀx_k) ) ]
//! ```
//!
//! With `w1 = w2 = 1` this is the exact partial log-likelihood. Risk sets
//! use `(start, stop]` membership. Every sum runs over event times in
//! ascending order and, within a risk set, over records ordered by
//! `(id, start)`, so results are deterministic.

use nalgebra::DMatrix;

use crate::data::{Batch, IntervalRecord};
use crate::error::{CoxError, Result};

/// `start < t <= stop`.
#[inline]
pub fn risk_indicator(record: &IntervalRecord, t: f64) -> bool {
    record.start < t && t <= record.stop
}

/// One event record together with everyone at risk at its event time.
#[derive(Debug, Clone)]
pub struct RiskSetView<'a> {
    pub event_time: f64,
    pub event_record: &'a IntervalRecord,
    pub at_risk: Vec<&'a IntervalRecord>,
}

/// Risk sets for every distinct event time of a record slice.
#[derive(Debug, Clone)]
pub struct RiskSets {
    times: Vec<f64>,
    events: Vec<Vec<usize>>,
    members: Vec<Vec<usize>>,
    p: usize,
}

impl RiskSets {
    pub fn build(records: &[IntervalRecord]) -> Result<Self> {
        let p = records.first().map_or(0, IntervalRecord::dim);
        if let Some(bad) = records.iter().find(|r| r.dim() != p) {
            return Err(CoxError::Dimension {
                expected: p,
                got: bad.dim(),
            });
        }
        let mut times: Vec<f64> = records.iter().filter(|r| r.event).map(|r| r.stop).collect();
        if times.is_empty() {
            return Err(CoxError::NoEvents);
        }
        times.sort_by(f64::total_cmp);
        times.dedup();

        let mut order: Vec<usize> = (0..records.len()).collect();
        order.sort_by(|&a, &b| {
            let (ra, rb) = (&records[a], &records[b]);
            ra.id.cmp(&rb.id).then(ra.start.total_cmp(&rb.start)).then(a.cmp(&b))
        });

        let mut events = vec![Vec::new(); times.len()];
        let mut members = vec![Vec::new(); times.len()];
        for &i in &order {
            let r = &records[i];
            let lo = times.partition_point(|&t| t <= r.start);
            let hi = times.partition_point(|&t| t <= r.stop);
            for m in &mut members[lo..hi] {
                m.push(i);
            }
            if r.event {
                let d = hi - 1;
                debug_assert_eq!(times[d], r.stop);
                events[d].push(i);
            }
        }
        if members.iter().any(Vec::is_empty) {
            return Err(CoxError::Internal("empty risk set at an event time".into()));
        }
        Ok(Self {
            times,
            events,
            members,
            p,
        })
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    /// Distinct event times, ascending.
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn n_events(&self) -> usize {
        self.events.iter().map(Vec::len).sum()
    }

    /// Indices of records at risk at the `d`-th distinct event time.
    pub fn members(&self, d: usize) -> &[usize] {
        &self.members[d]
    }

    /// Indices of event records at the `d`-th distinct event time.
    pub fn events_at(&self, d: usize) -> &[usize] {
        &self.events[d]
    }

    pub fn views<'a>(&self, records: &'a [IntervalRecord]) -> Vec<RiskSetView<'a>> {
        let mut out = Vec::with_capacity(self.n_events());
        for d in 0..self.times.len() {
            for &e in &self.events[d] {
                out.push(RiskSetView {
                    event_time: self.times[d],
                    event_record: &records[e],
                    at_risk: self.members[d].iter().map(|&k| &records[k]).collect(),
                });
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodValue {
    pub loglik: f64,
    pub gradient: Option<Vec<f64>>,
}

/// A log-likelihood term in θ with an analytic gradient.
pub trait LogLikelihood {
    fn dim(&self) -> usize;

    fn value(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.value_and_gradient(theta)?.0)
    }

    fn value_and_gradient(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// Prepared reweighted partial likelihood over a borrowed record slice.
#[derive(Debug, Clone)]
pub struct CoxLikelihood<'a> {
    records: &'a [IntervalRecord],
    risk: RiskSets,
    w1: f64,
    w2: f64,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Order {
    Value,
    Gradient,
    Information,
}

struct Evaluation {
    loglik: f64,
    gradient: Vec<f64>,
    information: Option<DMatrix<f64>>,
}

impl<'a> CoxLikelihood<'a> {
    pub fn new(records: &'a [IntervalRecord], w1: f64, w2: f64) -> Result<Self> {
        if !(w1 > 0.0 && w1.is_finite() && w2 > 0.0 && w2.is_finite()) {
            return Err(CoxError::InvalidArgument(format!("weights must be positive, got w1={w1}, w2={w2}")));
        }
        Ok(Self {
            records,
            risk: RiskSets::build(records)?,
            w1,
            w2,
        })
    }

    /// Exact partial likelihood (unit weights).
    pub fn exact(records: &'a [IntervalRecord]) -> Result<Self> {
        Self::new(records, 1.0, 1.0)
    }

    pub fn from_batch(batch: &'a Batch) -> Result<Self> {
        Self::new(&batch.records, batch.w1, batch.w2)
    }

    pub fn records(&self) -> &'a [IntervalRecord] {
        self.records
    }

    pub fn risk_sets(&self) -> &RiskSets {
        &self.risk
    }

    pub fn weights(&self) -> (f64, f64) {
        (self.w1, self.w2)
    }

    pub fn evaluate(&self, theta: &[f64]) -> Result<LikelihoodValue> {
        let ev = self.run(theta, Order::Gradient)?;
        Ok(LikelihoodValue {
            loglik: ev.loglik,
            gradient: Some(ev.gradient),
        })
    }

    /// Value, score and observed information (negative Hessian).
    pub fn information(&self, theta: &[f64]) -> Result<(f64, Vec<f64>, DMatrix<f64>)> {
        let ev = self.run(theta, Order::Information)?;
        Ok((ev.loglik, ev.gradient, ev.information.expect("requested")))
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.risk.p {
            return Err(CoxError::Dimension {
                expected: self.risk.p,
                got: theta.len(),
            });
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(CoxError::NonFinite("theta".into()));
        }
        Ok(())
    }

    fn run(&self, theta: &[f64], order: Order) -> Result<Evaluation> {
        self.check_theta(theta)?;
        let p = self.risk.p;
        let eta: Vec<f64> = self.records.iter().map(|r| dot(&r.covariates, theta)).collect();

        let mut main = 0.0;
        let mut n_events = 0usize;
        let mut grad = vec![0.0; p];
        let mut info = (order == Order::Information).then(|| DMatrix::<f64>::zeros(p, p));
        let mut weights: Vec<f64> = Vec::new();
        let mut centered = vec![0.0; p];

        for d in 0..self.risk.times.len() {
            let members = &self.risk.members[d];
            let events = &self.risk.events[d];
            let count = events.len() as f64;

            let m = members.iter().map(|&k| eta[k]).fold(f64::NEG_INFINITY, f64::max);
            weights.clear();
            weights.extend(members.iter().map(|&k| (eta[k] - m).exp()));
            let s0: f64 = weights.iter().sum();
            let lse = m + s0.ln();

            let event_eta: f64 = events.iter().map(|&e| eta[e]).sum();
            main += event_eta - count * lse;
            n_events += events.len();

            if order == Order::Value {
                continue;
            }
            // Centre on the first event's covariates: a column that is
            // constant over the risk set then contributes exactly zero.
            let reference = &self.records[events[0]].covariates;
            centered.iter_mut().for_each(|c| *c = 0.0);
            for (&k, &wk) in members.iter().zip(&weights) {
                let pk = wk / s0;
                let xk = &self.records[k].covariates;
                for j in 0..p {
                    centered[j] += pk * (xk[j] - reference[j]);
                }
            }
            for &e in events {
                let xe = &self.records[e].covariates;
                for j in 0..p {
                    grad[j] += xe[j] - reference[j];
                }
            }
            for j in 0..p {
                grad[j] -= count * centered[j];
            }

            if let Some(h) = info.as_mut() {
                // count * Cov_p(x) over the risk set, in centred coordinates.
                for (&k, &wk) in members.iter().zip(&weights) {
                    let pk = wk / s0;
                    let xk = &self.records[k].covariates;
                    for a in 0..p {
                        let da = xk[a] - reference[a] - centered[a];
                        if da == 0.0 {
                            continue;
                        }
                        for b in 0..=a {
                            let db = xk[b] - reference[b] - centered[b];
                            h[(a, b)] += count * pk * da * db;
                        }
                    }
                }
            }
        }

        let loglik = self.w1 * (main - n_events as f64 * self.w2.ln());
        if !loglik.is_finite() {
            return Err(CoxError::NonFinite("log-likelihood".into()));
        }
        grad.iter_mut().for_each(|g| *g *= self.w1);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(CoxError::NonFinite("log-likelihood gradient".into()));
        }
        if let Some(h) = info.as_mut() {
            for a in 0..p {
                for b in 0..a {
                    h[(b, a)] = h[(a, b)];
                }
            }
            *h *= self.w1;
        }
        Ok(Evaluation {
            loglik,
            gradient: grad,
            information: info,
        })
    }
}

impl LogLikelihood for CoxLikelihood<'_> {
    fn dim(&self) -> usize {
        self.risk.p
    }

    fn value(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.run(theta, Order::Value)?.loglik)
    }

    fn value_and_gradient(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let ev = self.run(theta, Order::Gradient)?;
        Ok((ev.loglik, ev.gradient))
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Exact partial log-likelihood and score.
pub fn partial_loglik(records: &[IntervalRecord], theta: &[f64]) -> Result<LikelihoodValue> {
    CoxLikelihood::exact(records)?.evaluate(theta)
}

/// Subsample log-likelihood with the batch's `w1`, `w2` weights.
pub fn reweighted_loglik(batch: &Batch, theta: &[f64]) -> Result<LikelihoodValue> {
    CoxLikelihood::from_batch(batch)?.evaluate(theta)
}

/// Score of the reweighted log-likelihood; `w2` does not enter.
pub fn loglik_gradient(batch: &Batch, theta: &[f64]) -> Result<Vec<f64>> {
    Ok(CoxLikelihood::from_batch(batch)?.value_and_gradient(theta)?.1)
}
