//! Staged consensus-influence attack: perturb a growing prefix of the
//! consensus features toward the baseline, querying the service once per
//! stage and stopping as soon as the top category drops below threshold.

use super::{
    perturbed_fraction, AdversarialSample, AttackError, AttackStatus, OracleAttackOutcome,
    StageRecord,
};
use crate::api::OracleClient;
use crate::influence::ConsensusSelection;
use crate::metrics::rmsd;
use crate::tensor::Tensor;
use crate::threat::{ErrorPolicy, ThreatModelConfig};
use crate::zoo::Sample;

/// One stage: perturb the strongest `fraction` of the selection, moving
/// each pixel toward the baseline by at most `epsilon_multiplier` times the
/// threat model's epsilon budget. `None` lifts the cap entirely (the pixel
/// lands exactly on the baseline).
#[derive(Debug, Clone, Copy)]
pub struct StagePlan {
    pub fraction: f64,
    pub epsilon_multiplier: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct StageSchedule {
    pub stages: Vec<StagePlan>,
}

impl Default for StageSchedule {
    /// Widening schedule: grow coverage at the base step allowance, then
    /// escalate the allowance, ending with an uncapped stage that equals
    /// full baseline replacement of the selection.
    fn default() -> Self {
        let s = |fraction, epsilon_multiplier| StagePlan {
            fraction,
            epsilon_multiplier,
        };
        Self {
            stages: vec![
                s(0.25, Some(1.0)),
                s(0.5, Some(1.0)),
                s(0.8, Some(1.0)),
                s(1.0, Some(1.0)),
                s(1.0, Some(2.0)),
                s(1.0, Some(4.0)),
                s(1.0, None),
            ],
        }
    }
}

/// Runs the staged attack for one sample through `client`. Each stage costs
/// one query. Returns early with status:
/// * [`AttackStatus::Evaded`] once the response's top percent falls below
///   `success_threshold_percent`,
/// * [`AttackStatus::HaltedByAlert`] if an alert-class error arrives under
///   [`ErrorPolicy::HaltOnAlert`],
/// * [`AttackStatus::BudgetExhausted`] when the client refuses mid-run.
///
/// An exhausted budget before the first query is an error: the attack never
/// started.
pub fn atf_influence_attack(
    sample: &Sample,
    baseline: &Tensor,
    selection: &ConsensusSelection,
    client: &OracleClient,
    threat: &ThreatModelConfig,
    schedule: &StageSchedule,
    success_threshold_percent: f64,
) -> Result<OracleAttackOutcome, AttackError> {
    threat
        .validate()
        .map_err(|e| AttackError::InvalidParams(e.to_string()))?;
    if selection.selected_indices.is_empty() {
        return Err(AttackError::EmptySelection);
    }
    if !sample.image.same_shape(baseline) {
        return Err(AttackError::ShapeMismatch {
            expected: sample.image.shape().to_vec(),
            actual: baseline.shape().to_vec(),
        });
    }

    let origin = sample.image.data();
    let base = baseline.data();
    let sel = &selection.selected_indices;

    let mut stages: Vec<StageRecord> = Vec::with_capacity(schedule.stages.len());
    let mut alert_count = 0u32;
    let mut error_codes = Vec::new();
    let mut best = sample.image.clone();
    let mut status = AttackStatus::NotEvaded;
    let mut attacked: Option<&'static str> = None;

    for (i, plan) in schedule.stages.iter().enumerate() {
        let count = ((plan.fraction * sel.len() as f64).ceil() as usize).clamp(1, sel.len());
        let step_limit = plan.epsilon_multiplier.map(|m| m * threat.epsilon_budget);

        let mut px = origin.to_vec();
        for &idx in sel.iter().take(count) {
            let delta = base[idx] - origin[idx];
            px[idx] = match step_limit {
                Some(limit) => origin[idx] + delta.clamp(-limit, limit),
                None => base[idx],
            };
        }
        let candidate = Tensor::new(px, sample.image.shape().to_vec())
            .map_err(crate::graph::GraphError::from)?;

        let response = match client.classify(&candidate) {
            Ok(r) => r,
            Err(_) if stages.is_empty() => {
                return Err(AttackError::QueryBudgetExceeded {
                    spent: client.spent(),
                })
            }
            Err(_) => {
                status = AttackStatus::BudgetExhausted;
                break;
            }
        };

        let mut record = StageRecord {
            stage: i,
            selection_fraction: plan.fraction,
            step_limit,
            top_category: None,
            top_percent: None,
            attacked_percent: None,
            error_code: response.error_code(),
            rmsd_from_original: rmsd(&candidate, &sample.image).unwrap_or(f64::NAN),
            perturbed_fraction: perturbed_fraction(&candidate, &sample.image),
        };

        if let Some(code) = response.error_code() {
            error_codes.push(code);
            if response.is_alert() {
                alert_count += 1;
                if threat.error_policy == ErrorPolicy::HaltOnAlert {
                    stages.push(record);
                    best = candidate;
                    status = AttackStatus::HaltedByAlert;
                    break;
                }
            }
            stages.push(record);
            continue; // no score to read; widen and retry
        }

        let (top_cat, top_pct) = response.top_category().expect("scores present");
        let attacked_cat = *attacked.get_or_insert(top_cat);
        record.top_category = Some(top_cat.to_string());
        record.top_percent = Some(top_pct);
        record.attacked_percent = response.score(attacked_cat);
        stages.push(record);
        best = candidate;
        if top_pct < success_threshold_percent {
            status = AttackStatus::Evaded;
            break;
        }
    }

    let iterations_completed = stages.len();
    Ok(OracleAttackOutcome {
        sample: AdversarialSample {
            perturbed_fraction: perturbed_fraction(&best, &sample.image),
            original: sample.clone(),
            perturbed: best,
            generator_id: "atf".into(),
            surrogate_ids: selection.per_model_active.keys().cloned().collect(),
            queries_spent: client.spent(),
            surrogate_evading: false,
        },
        status,
        stages,
        iterations_completed,
        alert_count,
        error_codes,
    })
}
