//! Threat-model description shared by attack generators and campaign
//! orchestration.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ThreatError {
    #[error("query_budget must be >= 1")]
    ZeroBudget,
    #[error("epsilon_budget must be positive, got {0}")]
    BadEpsilon(f64),
}

/// How the attacker reacts to alert-class errors (the background-service
/// code the detector raises).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorPolicy {
    /// Abort the attack on the first alert; stealth matters more than success.
    HaltOnAlert,
    /// Record alerts and keep going.
    TolerateAlerts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Goal {
    /// Drive every category score below the decision threshold.
    Untargeted,
    /// Make one chosen category the top one.
    Targeted { class: usize },
}

/// Attacker-side resource and behaviour constraints. `query_budget` bounds
/// the scoring-service calls a single (sample, attack) run may spend;
/// campaign-wide totals are capped separately by the orchestrator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThreatModelConfig {
    pub query_budget: u64,
    pub error_policy: ErrorPolicy,
    pub goal: Goal,
    /// L-infinity step allowance, in pixel units, for bounded attack stages.
    pub epsilon_budget: f64,
    /// Whether adversarial samples must be re-verified after the service
    /// retrains its model.
    pub persistence_required: bool,
    /// Reserved for services backed by several submodels; carried through
    /// to reports but not otherwise acted on by the simulator.
    pub multi_model_target: bool,
}

impl Default for ThreatModelConfig {
    fn default() -> Self {
        Self {
            query_budget: 10_000,
            error_policy: ErrorPolicy::HaltOnAlert,
            goal: Goal::Untargeted,
            epsilon_budget: 32.0,
            persistence_required: false,
            multi_model_target: false,
        }
    }
}

impl ThreatModelConfig {
    pub fn validate(&self) -> Result<(), ThreatError> {
        if self.query_budget == 0 {
            return Err(ThreatError::ZeroBudget);
        }
        if !(self.epsilon_budget > 0.0) {
            return Err(ThreatError::BadEpsilon(self.epsilon_budget));
        }
        Ok(())
    }

    pub fn target_label(&self) -> Option<usize> {
        match self.goal {
            Goal::Untargeted => None,
            Goal::Targeted { class } => Some(class),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ThreatModelConfig::default().validate().unwrap();
    }

    #[test]
    fn zero_budget_rejected() {
        let cfg = ThreatModelConfig {
            query_budget: 0,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(ThreatError::ZeroBudget)));
    }

    #[test]
    fn nonpositive_epsilon_rejected() {
        let cfg = ThreatModelConfig {
            epsilon_budget: 0.0,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(ThreatError::BadEpsilon(_))));
    }
}
