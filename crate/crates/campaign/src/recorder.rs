//! Error recorder: every error response the campaign sees is kept with the
//! stage that provoked it and a runtime/system classification, so reports
//! can show which attack families drew which failure modes.

use atf_core::api::{error_kind, ErrorKind, OracleResponse, ALERT_CODE};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// What a code means for the attacker's plan.
pub fn implication(code: i32) -> &'static str {
    match code {
        -7 => "request rejected before scoring; fix the protocol, no model signal",
        -9 => "payload rejected; encoding must match the service contract",
        -10 => "category filter rejected",
        -11 | -12 => "server-side decode failure; no model signal",
        -15 => "throttled or refused; pace queries against the rate limit",
        -16 => "scan backend failure",
        -17 => "URL fetch path rejected; submit inline payloads",
        -20 => "transient server fault; safe to retry",
        -21 => "empty fetch result",
        -22 => "service dependency failure",
        -23 => "daemon failure; back off",
        -25 => "defender alerted; stealth objective compromised",
        -26 => "malformed request body",
        _ => "unknown code; treat conservatively as detection risk",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorEntry {
    pub request_id: u64,
    pub code: i32,
    /// `phase:family`, e.g. `probe:gaussian-8` or `attack:fgsm`.
    pub attack_stage: String,
    pub classification: String,
    pub alert_class: bool,
    pub implication: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub entries: Vec<ErrorEntry>,
}

impl ErrorRecord {
    /// Appends the response's error, if it carries one. Unknown codes are
    /// recorded with classification `unknown`, never dropped.
    pub fn record(&mut self, response: &OracleResponse, stage: &str) {
        if let Some(code) = response.error_code() {
            self.record_code(response.request_id, code, stage);
        }
    }

    pub fn record_code(&mut self, request_id: u64, code: i32, stage: &str) {
        let classification = match error_kind(code) {
            Some(ErrorKind::Runtime) => "runtime",
            Some(ErrorKind::System) => "system",
            None => "unknown",
        };
        self.entries.push(ErrorEntry {
            request_id,
            code,
            attack_stage: stage.to_string(),
            classification: classification.into(),
            alert_class: code == ALERT_CODE,
            implication: implication(code).into(),
        });
    }

    /// Families (the part after `phase:`) that have drawn an alert-class
    /// error in any stage so far.
    pub fn alerted_families(&self) -> BTreeSet<String> {
        self.entries
            .iter()
            .filter(|e| e.alert_class)
            .filter_map(|e| e.attack_stage.split(':').nth(1))
            .map(str::to_string)
            .collect()
    }

    /// Alert-class entries whose stage starts with the given phase prefix.
    pub fn alerts_in_phase(&self, phase: &str) -> usize {
        let prefix = format!("{phase}:");
        self.entries
            .iter()
            .filter(|e| e.alert_class && e.attack_stage.starts_with(&prefix))
            .count()
    }

    pub fn codes(&self) -> Vec<i32> {
        self.entries.iter().map(|e| e.code).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alert_code_is_system_and_alert_class() {
        let mut rec = ErrorRecord::default();
        rec.record(&OracleResponse::from_error(3, -25), "attack:fgsm");
        let e = &rec.entries[0];
        assert_eq!(e.classification, "system");
        assert!(e.alert_class);
        assert_eq!(e.request_id, 3);
        assert_eq!(rec.alerted_families(), ["fgsm".to_string()].into());
        assert_eq!(rec.alerts_in_phase("attack"), 1);
        assert_eq!(rec.alerts_in_phase("probe"), 0);
    }

    #[test]
    fn runtime_codes_classify_as_runtime() {
        let mut rec = ErrorRecord::default();
        rec.record(&OracleResponse::from_error(1, -7), "probe:fd");
        assert_eq!(rec.entries[0].classification, "runtime");
        assert!(!rec.entries[0].alert_class);
    }

    #[test]
    fn unknown_codes_are_kept_not_dropped() {
        let mut rec = ErrorRecord::default();
        rec.record(&OracleResponse::from_error(1, 999), "attack:atf");
        assert_eq!(rec.entries.len(), 1);
        assert_eq!(rec.entries[0].classification, "unknown");
    }

    #[test]
    fn score_responses_record_nothing() {
        let mut rec = ErrorRecord::default();
        rec.record(&OracleResponse::from_scores(1, [0.0; 5]), "probe:clean");
        assert!(rec.entries.is_empty());
    }
}
