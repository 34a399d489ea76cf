//! Campaign configuration: a flat key/value file with `[threat]`,
//! `[oracle]`, `[bank]`, `[dataset]` and `[attacks]` sections. Every key
//! has a default so fixtures only state what they change.

use atf_core::threat::{ErrorPolicy, Goal, ThreatModelConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::selector::DECLARED_ORDER;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("threat.query_budget must be >= 1")]
    ZeroBudget,
    #[error("threat.epsilon_budget must be > 0, got {0}")]
    BadEpsilon(f64),
    #[error("threat.error_policy must be halt-on-alert or tolerate-alerts, got {0:?}")]
    BadPolicy(String),
    #[error("threat.goal must be untargeted or targeted, got {0:?}")]
    BadGoal(String),
    #[error("threat.target_class must name one of the 5 categories, got {0}")]
    BadTargetClass(usize),
    #[error("oracle.mode must be in-process or http, got {0:?}")]
    BadOracleMode(String),
    #[error("oracle.url is required when oracle.mode is http")]
    MissingUrl,
    #[error("oracle.threshold_percent must lie strictly between 0 and 100, got {0}")]
    BadThreshold(f64),
    #[error("bank.source must be train or load, got {0:?}")]
    BadBankSource(String),
    #[error("bank.dir is required when bank.source is load")]
    MissingBankDir,
    #[error("bank.per_class must be >= 4, got {0}")]
    BankTooSmall(usize),
    #[error("bank.epochs must be >= 1")]
    ZeroEpochs,
    #[error("dataset.source must be synthetic or idx, got {0:?}")]
    BadDatasetSource(String),
    #[error("dataset.images and dataset.labels are required when dataset.source is idx")]
    MissingIdxPaths,
    #[error("dataset.per_class must be >= 4, got {0}")]
    DatasetTooSmall(usize),
    #[error("attacks.enabled must not be empty")]
    NoAttacks,
    #[error("unknown attack id {0:?}; known ids: {1:?}")]
    UnknownAttack(String, &'static [&'static str]),
    #[error("attacks.{key} must be >= 1")]
    ZeroIterations { key: &'static str },
    #[error("attacks.{key} must be > 0, got {value}")]
    NonPositive { key: &'static str, value: f64 },
    #[error("attacks.consensus_n must lie in 1..5 (strict majority threshold), got {0}")]
    BadConsensusN(usize),
    #[error("attacks.top_fraction must lie in (0, 1], got {0}")]
    BadTopFraction(f64),
    #[error("attacks.probe_samples must be >= 1 when probing is enabled")]
    ZeroProbeSamples,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThreatSection {
    pub query_budget: u64,
    /// Total oracle-call cap across the whole campaign; 0 means uncapped.
    pub campaign_budget: u64,
    pub error_policy: String,
    pub goal: String,
    pub target_class: usize,
    pub epsilon_budget: f64,
    pub persistence_required: bool,
    pub multi_model_target: bool,
}

impl Default for ThreatSection {
    fn default() -> Self {
        Self {
            query_budget: 10_000,
            campaign_budget: 0,
            error_policy: "halt-on-alert".into(),
            goal: "untargeted".into(),
            target_class: 0,
            epsilon_budget: 32.0,
            persistence_required: false,
            multi_model_target: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    pub mode: String,
    pub url: String,
    /// Policy file for the in-process service; empty means defaults.
    pub policy: String,
    /// Decision threshold the attacker assumes when judging evasion.
    pub threshold_percent: f64,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            mode: "in-process".into(),
            url: String::new(),
            policy: String::new(),
            threshold_percent: 50.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankSection {
    pub source: String,
    pub dir: String,
    pub data_seed: u64,
    pub per_class: usize,
    pub train_seed: u64,
    pub epochs: usize,
}

impl Default for BankSection {
    fn default() -> Self {
        Self {
            source: "train".into(),
            dir: String::new(),
            data_seed: 7,
            per_class: 64,
            train_seed: 42,
            epochs: 24,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub source: String,
    pub seed: u64,
    pub per_class: usize,
    pub images: String,
    pub labels: String,
    /// Cap on how many samples the campaign attacks; 0 means all.
    pub sample_limit: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            source: "synthetic".into(),
            seed: 7,
            per_class: 80,
            images: String::new(),
            labels: String::new(),
            sample_limit: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub enabled: Vec<String>,
    /// Crafting seed: probe noise, estimation directions.
    pub seed: u64,
    pub ig_steps: usize,
    pub consensus_n: usize,
    pub top_fraction: f64,
    /// Drop consensus pixels whose summed signed influence is negative
    /// before staging (zeroing those would push the category back up).
    pub sign_filter: bool,
    pub ge_iterations: usize,
    pub ge_samples: usize,
    pub ge_step: f64,
    pub ge_delta: f64,
    pub fd_iterations: usize,
    pub fd_step: f64,
    pub sign_epsilon: f64,
    pub ifgsm_iterations: usize,
    pub ifgsm_step: f64,
    pub jsma_pixels: usize,
    pub probe_enabled: bool,
    pub probe_samples: usize,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            enabled: DECLARED_ORDER.iter().map(|s| s.to_string()).collect(),
            seed: 5,
            ig_steps: 50,
            consensus_n: 3,
            top_fraction: 0.10,
            sign_filter: true,
            ge_iterations: 16,
            ge_samples: 120,
            ge_step: 4.0,
            ge_delta: 32.0,
            fd_iterations: 8,
            fd_step: 8.0,
            sign_epsilon: 16.0,
            ifgsm_iterations: 8,
            ifgsm_step: 4.0,
            jsma_pixels: 40,
            probe_enabled: true,
            probe_samples: 4,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    pub threat: ThreatSection,
    pub oracle: OracleSection,
    pub bank: BankSection,
    pub dataset: DatasetSection,
    pub attacks: AttackSection,
}

impl CampaignConfig {
    pub fn from_toml_str(doc: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(doc)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let doc = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&doc)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.threat;
        if t.query_budget == 0 {
            return Err(ConfigError::ZeroBudget);
        }
        if !(t.epsilon_budget > 0.0) {
            return Err(ConfigError::BadEpsilon(t.epsilon_budget));
        }
        if !matches!(t.error_policy.as_str(), "halt-on-alert" | "tolerate-alerts") {
            return Err(ConfigError::BadPolicy(t.error_policy.clone()));
        }
        match t.goal.as_str() {
            "untargeted" => {}
            "targeted" => {
                if t.target_class >= 5 {
                    return Err(ConfigError::BadTargetClass(t.target_class));
                }
            }
            other => return Err(ConfigError::BadGoal(other.to_string())),
        }

        let o = &self.oracle;
        match o.mode.as_str() {
            "in-process" => {}
            "http" => {
                if o.url.is_empty() {
                    return Err(ConfigError::MissingUrl);
                }
            }
            other => return Err(ConfigError::BadOracleMode(other.to_string())),
        }
        if !(o.threshold_percent > 0.0 && o.threshold_percent < 100.0) {
            return Err(ConfigError::BadThreshold(o.threshold_percent));
        }

        let b = &self.bank;
        match b.source.as_str() {
            "train" => {
                if b.per_class < 4 {
                    return Err(ConfigError::BankTooSmall(b.per_class));
                }
                if b.epochs == 0 {
                    return Err(ConfigError::ZeroEpochs);
                }
            }
            "load" => {
                if b.dir.is_empty() {
                    return Err(ConfigError::MissingBankDir);
                }
            }
            other => return Err(ConfigError::BadBankSource(other.to_string())),
        }

        let d = &self.dataset;
        match d.source.as_str() {
            "synthetic" => {
                if d.per_class < 4 {
                    return Err(ConfigError::DatasetTooSmall(d.per_class));
                }
            }
            "idx" => {
                if d.images.is_empty() || d.labels.is_empty() {
                    return Err(ConfigError::MissingIdxPaths);
                }
            }
            other => return Err(ConfigError::BadDatasetSource(other.to_string())),
        }

        let a = &self.attacks;
        if a.enabled.is_empty() {
            return Err(ConfigError::NoAttacks);
        }
        for id in &a.enabled {
            if !DECLARED_ORDER.contains(&id.as_str()) {
                return Err(ConfigError::UnknownAttack(id.clone(), &DECLARED_ORDER));
            }
        }
        if a.ig_steps == 0 {
            return Err(ConfigError::ZeroIterations { key: "ig_steps" });
        }
        if !(a.consensus_n >= 1 && a.consensus_n < 5) {
            return Err(ConfigError::BadConsensusN(a.consensus_n));
        }
        if !(a.top_fraction > 0.0 && a.top_fraction <= 1.0) {
            return Err(ConfigError::BadTopFraction(a.top_fraction));
        }
        for (key, v) in [
            ("ge_iterations", a.ge_iterations),
            ("ge_samples", a.ge_samples),
            ("fd_iterations", a.fd_iterations),
            ("ifgsm_iterations", a.ifgsm_iterations),
        ] {
            if v == 0 {
                return Err(ConfigError::ZeroIterations { key });
            }
        }
        for (key, v) in [
            ("ge_step", a.ge_step),
            ("ge_delta", a.ge_delta),
            ("fd_step", a.fd_step),
            ("sign_epsilon", a.sign_epsilon),
            ("ifgsm_step", a.ifgsm_step),
        ] {
            if !(v > 0.0) {
                return Err(ConfigError::NonPositive { key, value: v });
            }
        }
        if a.probe_enabled && a.probe_samples == 0 {
            return Err(ConfigError::ZeroProbeSamples);
        }
        Ok(())
    }

    /// The threat model the attack engines consume.
    pub fn threat_model(&self) -> ThreatModelConfig {
        let t = &self.threat;
        ThreatModelConfig {
            query_budget: t.query_budget,
            error_policy: match t.error_policy.as_str() {
                "tolerate-alerts" => ErrorPolicy::TolerateAlerts,
                _ => ErrorPolicy::HaltOnAlert,
            },
            goal: match t.goal.as_str() {
                "targeted" => Goal::Targeted {
                    class: t.target_class,
                },
                _ => Goal::Untargeted,
            },
            epsilon_budget: t.epsilon_budget,
            persistence_required: t.persistence_required,
            multi_model_target: t.multi_model_target,
        }
    }
}
