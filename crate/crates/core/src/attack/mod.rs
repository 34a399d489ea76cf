//! Evasion attack generators.
//!
//! Three families:
//! * white-box transfer attacks crafted on a surrogate ([`fgsm`], [`ifgsm`],
//!   [`jsma`]) that spend no service queries,
//! * the staged consensus-influence attack ([`atf_influence_attack`]) that
//!   spends roughly one query per stage,
//! * query-only gradient estimators ([`finite_difference_attack`],
//!   [`gradient_estimation_attack`]) that probe the service directly.

mod gradient_sign;
mod jsma;
mod query;
mod staged;

pub use gradient_sign::{fgsm, ifgsm};
pub use jsma::jsma;
pub use query::{finite_difference_attack, gradient_estimation_attack};
pub use staged::{atf_influence_attack, StagePlan, StageSchedule};

use crate::graph::GraphError;
use crate::tensor::Tensor;
use crate::zoo::Sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack parameters: {0}")]
    InvalidParams(String),
    #[error("query budget exhausted before the attack could make progress (spent {spent})")]
    QueryBudgetExceeded { spent: u64 },
    #[error("sample image shape {actual:?} does not match model input {expected:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("consensus selection is empty; nothing to perturb")]
    EmptySelection,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Shared generator knobs. `iterations` is the step count for iterative
/// attacks and the modified-pixel allowance for the saliency attack.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackParams {
    /// L-infinity radius around the original image, in pixel units.
    pub epsilon: f64,
    pub iterations: usize,
    pub step_size: f64,
    pub target_label: Option<usize>,
    pub pixel_bounds: (f64, f64),
}

impl Default for AttackParams {
    fn default() -> Self {
        Self {
            epsilon: 16.0,
            iterations: 20,
            step_size: 2.0,
            target_label: None,
            pixel_bounds: (0.0, 255.0),
        }
    }
}

impl AttackParams {
    /// Checks the invariants iterative generators rely on: positive epsilon,
    /// at least one iteration, and steps no larger than the ball radius.
    pub fn validate(&self) -> Result<(), AttackError> {
        if !(self.epsilon > 0.0) {
            return Err(AttackError::InvalidParams(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.iterations == 0 {
            return Err(AttackError::InvalidParams("iterations must be >= 1".into()));
        }
        if !(self.step_size > 0.0) || self.step_size > self.epsilon {
            return Err(AttackError::InvalidParams(format!(
                "step_size must lie in (0, epsilon]; got {} with epsilon {}",
                self.step_size, self.epsilon
            )));
        }
        if self.pixel_bounds.0 >= self.pixel_bounds.1 {
            return Err(AttackError::InvalidParams(format!(
                "pixel bounds ({}, {}) are empty",
                self.pixel_bounds.0, self.pixel_bounds.1
            )));
        }
        Ok(())
    }
}

/// Output of any generator: the perturbed image plus provenance and
/// accounting. Pixel bounds always hold for `perturbed`; epsilon-bounded
/// generators additionally keep `perturbed` inside the epsilon ball.
#[derive(Debug, Clone)]
pub struct AdversarialSample {
    pub original: Sample,
    pub perturbed: Tensor,
    pub generator_id: String,
    /// Models consulted while crafting (crafting surrogate or bank members).
    pub surrogate_ids: Vec<String>,
    /// Scoring-service queries spent by the generator itself.
    pub queries_spent: u64,
    /// Fraction of pixels that differ from the original.
    pub perturbed_fraction: f64,
    /// For surrogate-only attacks: whether the crafting surrogate no longer
    /// assigns the original label (or assigns the target, when targeted).
    pub surrogate_evading: bool,
}

impl AdversarialSample {
    pub fn rmsd(&self) -> f64 {
        crate::metrics::rmsd(&self.perturbed, &self.original.image).unwrap_or(f64::NAN)
    }
}

pub(crate) fn perturbed_fraction(a: &Tensor, b: &Tensor) -> f64 {
    let changed = a
        .data()
        .iter()
        .zip(b.data())
        .filter(|(x, y)| x != y)
        .count();
    changed as f64 / a.len() as f64
}

/// Terminal condition of an oracle-driven attack run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackStatus {
    /// Scores observed below the decision threshold.
    Evaded,
    /// Ran to completion without evading.
    NotEvaded,
    /// The per-run query budget ran out mid-attack.
    BudgetExhausted,
    /// Stopped by the halt-on-alert error policy.
    HaltedByAlert,
}

/// One perturbation stage of an oracle-driven attack, as submitted and
/// answered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    /// Fraction of the consensus selection perturbed at this stage (staged
    /// attack) or the iteration number scaled to (0, 1] (query attacks).
    pub selection_fraction: f64,
    /// Per-pixel step allowance at this stage; `None` means unbounded.
    pub step_limit: Option<f64>,
    pub top_category: Option<String>,
    pub top_percent: Option<f64>,
    /// Percent of the category that was on top when scoring began — the one
    /// the attack is driving down. Stays the same category across stages;
    /// `None` for error stages and for attacks that re-target per iteration.
    pub attacked_percent: Option<f64>,
    pub error_code: Option<i32>,
    pub rmsd_from_original: f64,
    pub perturbed_fraction: f64,
}

/// Full result of an oracle-driven attack, including partial progress when
/// the run ended early (budget or alert policy).
#[derive(Debug, Clone)]
pub struct OracleAttackOutcome {
    pub sample: AdversarialSample,
    pub status: AttackStatus,
    pub stages: Vec<StageRecord>,
    pub iterations_completed: usize,
    pub alert_count: u32,
    pub error_codes: Vec<i32>,
}

pub(crate) fn clamp_to_ball(value: f64, origin: f64, epsilon: f64, bounds: (f64, f64)) -> f64 {
    value
        .clamp(origin - epsilon, origin + epsilon)
        .clamp(bounds.0, bounds.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_validate_ranges() {
        AttackParams::default().validate().unwrap();
        assert!(AttackParams {
            epsilon: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(AttackParams {
            iterations: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(AttackParams {
            step_size: 17.0,
            epsilon: 16.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(AttackParams {
            pixel_bounds: (1.0, 1.0),
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn clamp_respects_ball_then_bounds() {
        assert_eq!(clamp_to_ball(300.0, 250.0, 16.0, (0.0, 255.0)), 255.0);
        assert_eq!(clamp_to_ball(-5.0, 4.0, 16.0, (0.0, 255.0)), 0.0);
        assert_eq!(clamp_to_ball(30.0, 10.0, 16.0, (0.0, 255.0)), 26.0);
    }
}
