//! Bayesian Cox proportional-hazards regression fitted by stochastic
//! variational inference on subsampled counting-process data.
//!
//! The pipeline: long-format interval records ([`data`]) are subsampled
//! into batches whose partial likelihood is reweighted to stand in for the
//! full data ([`likelihood`]); a Gaussian approximation ([`variational`]) to
//! the posterior under a Normal or Student-t prior ([`priors`]) is fitted by
//! Adam on a Monte-Carlo ELBO ([`svi`]). [`oracle`] provides exact
//! Newton-Raphson fits for comparison, [`simulator`] generates cohorts with
//! known coefficients, and [`metrics`] holds concordance and the simulation
//! harnesses.

pub mod data;
pub mod error;
pub mod likelihood;
pub mod metrics;
pub mod oracle;
pub mod priors;
pub mod simulator;
pub mod svi;
pub mod variational;

pub use data::{
    parse_long_csv, sample_batch, validate, Batch, BatchMode, ColumnSchema, DataSource, Dataset, DatasetTotals,
    IndexedCsv, IntervalRecord,
};
pub use error::{CoxError, Result};
pub use likelihood::{loglik_gradient, partial_loglik, reweighted_loglik, CoxLikelihood, LogLikelihood};
pub use oracle::{newton_fit, MleResult};
pub use priors::{log_prior, log_prior_grad, PriorSpec};
pub use svi::{fit, BatchSpec, FitConfig, FitResult};
pub use variational::{marginal_summary, Family, PosteriorSummary, VariationalState};
