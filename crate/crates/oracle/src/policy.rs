//! Service policy: a flat key/value document controlling thresholds, rate
//! limits, detector behaviour, and the hidden model's training recipe.

use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("cannot read policy file: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse policy: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("threshold_percent must lie strictly between 0 and 100, got {0}")]
    BadThreshold(f64),
    #[error("max_queries_per_session must be >= 1")]
    ZeroQueryLimit,
    #[error("detector_rmsd_window must be positive, got {0}")]
    BadWindow(f64),
    #[error("per_class must be >= 4 so calibration and holdout splits are populated")]
    TooFewSamples,
    #[error("epochs must be >= 1")]
    ZeroEpochs,
}

/// Everything the service operator chooses. One flat table; every field has
/// a default, so an empty document is a valid policy.
///
/// `update_after_queries` and `fault_every` use 0 for "disabled" to keep the
/// file flat. The error-code vocabulary itself is fixed (see
/// `atf_core::api::ERROR_TABLE`) and deliberately not configurable.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OraclePolicy {
    /// Decision threshold in percent; categories at or above it count as
    /// flagged.
    pub threshold_percent: f64,
    /// Per-session attempt cap. Requests beyond it receive code −15.
    pub max_queries_per_session: u64,
    pub detector_enabled: bool,
    /// Pairwise image distance below which repeated session queries look
    /// like a probing pattern.
    pub detector_rmsd_window: f64,
    /// Retrain and swap the hidden model after every N served queries
    /// service-wide; 0 disables scheduled updates.
    pub update_after_queries: u64,
    /// Inject a transient backend fault (code −20) on every Nth request
    /// service-wide; 0 disables injection.
    pub fault_every: u64,
    /// Seed for hidden-model initialisation and shuffling.
    pub seed: u64,
    pub epochs: usize,
    /// Seed for the synthetic corpus the hidden model trains on.
    pub data_seed: u64,
    /// Images per category in that corpus.
    pub per_class: usize,
    /// Listen address for `oracle serve`.
    pub bind: String,
}

impl Default for OraclePolicy {
    fn default() -> Self {
        Self {
            threshold_percent: 50.0,
            max_queries_per_session: 10_000,
            detector_enabled: true,
            detector_rmsd_window: 1.0,
            update_after_queries: 0,
            fault_every: 0,
            seed: 99,
            epochs: 30,
            data_seed: 7,
            per_class: 80,
            bind: "127.0.0.1:7878".into(),
        }
    }
}

impl OraclePolicy {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(self.threshold_percent > 0.0 && self.threshold_percent < 100.0) {
            return Err(PolicyError::BadThreshold(self.threshold_percent));
        }
        if self.max_queries_per_session == 0 {
            return Err(PolicyError::ZeroQueryLimit);
        }
        if !(self.detector_rmsd_window > 0.0) {
            return Err(PolicyError::BadWindow(self.detector_rmsd_window));
        }
        if self.per_class < 4 {
            return Err(PolicyError::TooFewSamples);
        }
        if self.epochs == 0 {
            return Err(PolicyError::ZeroEpochs);
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, PolicyError> {
        let policy: Self = toml::from_str(text)?;
        policy.validate()?;
        Ok(policy)
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}
