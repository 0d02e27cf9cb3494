//! TOML run configuration. Every section is optional; command-line flags
//! override whatever the file sets.

use std::path::Path;

use coxvi::data::ColumnSchema;
use coxvi::metrics::SparseTruth;
use coxvi::oracle::NewtonOptions;
use coxvi::simulator::SimConfig;
use coxvi::{BatchSpec, Family, FitConfig, PriorSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub columns: Option<ColumnSchema>,
    pub sim: Option<SimConfig>,
    pub calibrate: Option<Calibration>,
    pub prior: Option<PriorSpec>,
    pub family: Option<Family>,
    pub fit: Option<FitConfig>,
    pub oracle: Option<NewtonOptions>,
    pub summary: Option<SummarySection>,
    pub study: Option<StudySection>,
    pub coverage: Option<CoverageSection>,
}

/// Choose `sim.hazard_scale` so a pilot cohort reaches this censorship.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    pub target_censorship: f64,
    #[serde(default = "default_pilot")]
    pub pilot_n: usize,
}

fn default_pilot() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummarySection {
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySection {
    pub batch: BatchSpec,
    pub n_batches: usize,
    /// Coefficients at which the likelihoods are compared; zeros if absent.
    pub theta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoverageSection {
    pub runs: usize,
    pub sparse_truth: Option<SparseTruth>,
    /// |θ| threshold for reporting identification of strong effects.
    pub strong_threshold: Option<f64>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Validation(format!("config {}: {}", path.display(), e.message())))
    }

    pub fn level(&self) -> f64 {
        self.summary.as_ref().map_or(0.95, |s| s.level)
    }
}
