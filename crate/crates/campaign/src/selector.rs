//! Attack selection. Rehearsal evidence and the threat model are folded
//! into a demerit score per family; ties fall back to the declared
//! preference order. Under a halt-on-alert policy a family that alerted
//! during rehearsal is not merely ranked last — it is dropped from the
//! executable plan, because one alert would end the whole campaign session.

use atf_core::threat::ErrorPolicy;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Preference order used to break ties, cheapest-per-query first.
pub const DECLARED_ORDER: [&str; 6] = [
    "atf",
    "gradient-estimation",
    "finite-difference",
    "ifgsm",
    "fgsm",
    "jsma",
];

#[derive(Debug, Clone)]
pub struct SelectionContext {
    pub query_budget: u64,
    pub error_policy: ErrorPolicy,
    /// Number of scalar inputs per sample; one finite-difference sweep
    /// costs two queries per input.
    pub input_dim: usize,
    /// A surrogate bank and consensus pixel set are available.
    pub consensus_ready: bool,
    /// Families that drew an alert-class error during rehearsal.
    pub alerted_families: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedAttack {
    pub family: String,
    pub demerit: u32,
    pub excluded: bool,
    pub reasons: Vec<String>,
}

fn declared_index(family: &str) -> usize {
    DECLARED_ORDER
        .iter()
        .position(|&f| f == family)
        .unwrap_or(DECLARED_ORDER.len())
}

/// Ranks the enabled families: lowest demerit first, then declared order.
/// `atf` jumps ahead of its peers only when a consensus set actually
/// exists to drive it.
pub fn rank_attacks(enabled: &[String], ctx: &SelectionContext) -> Vec<RankedAttack> {
    let mut ranked: Vec<(u32, u32, usize, RankedAttack)> = enabled
        .iter()
        .map(|family| {
            let mut demerit = 0u32;
            let mut reasons = Vec::new();
            let mut excluded = false;
            if ctx.alerted_families.contains(family) {
                if ctx.error_policy == ErrorPolicy::HaltOnAlert {
                    demerit += 2;
                    excluded = true;
                    reasons.push("alerted during rehearsal; one alert halts this campaign".into());
                } else {
                    demerit += 1;
                    reasons.push("alerted during rehearsal; noisy but tolerated".into());
                }
            }
            if family == "finite-difference"
                && ctx.query_budget < 2 * ctx.input_dim as u64
            {
                demerit += 1;
                reasons.push(format!(
                    "budget {} cannot cover one sweep of {} inputs",
                    ctx.query_budget,
                    2 * ctx.input_dim
                ));
            }
            let preference = if family == "atf" && ctx.consensus_ready {
                0
            } else {
                1
            };
            (
                demerit,
                preference,
                declared_index(family),
                RankedAttack {
                    family: family.clone(),
                    demerit,
                    excluded,
                    reasons,
                },
            )
        })
        .collect();
    ranked.sort_by_key(|(demerit, pref, idx, _)| (*demerit, *pref, *idx));
    ranked.into_iter().map(|(_, _, _, r)| r).collect()
}

/// The single best family, if any enabled family survives exclusion.
pub fn select_attack(enabled: &[String], ctx: &SelectionContext) -> Option<RankedAttack> {
    rank_attacks(enabled, ctx)
        .into_iter()
        .find(|r| !r.excluded)
}

/// Ranked families with the excluded ones removed: the execution plan.
pub fn executable(enabled: &[String], ctx: &SelectionContext) -> Vec<RankedAttack> {
    rank_attacks(enabled, ctx)
        .into_iter()
        .filter(|r| !r.excluded)
        .collect()
}
