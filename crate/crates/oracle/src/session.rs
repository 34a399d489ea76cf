//! Per-session accounting: attempt/served/alert counters, the emitted-error
//! list, an append-only audit log, and the probe-pattern window.
//!
//! Conservation is the load-bearing invariant: every attempt ends up either
//! served or errored, exactly once, so `audit length == served + errored`
//! holds at all times — it is what campaign-side query accounting is checked
//! against.

use crate::detector::ProbeWindow;
use atf_core::api::ALERT_CODE;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

/// One request's outcome in the audit log. Request ids are per-session and
/// sequential, so the id of `entries[i]` is `i + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuditOutcome {
    Served,
    Errored(i32),
}

pub struct SessionState {
    pub id: u64,
    limit: u64,
    attempted: AtomicU64,
    served: AtomicU64,
    alerts: AtomicU64,
    errors: Mutex<Vec<(u64, i32)>>,
    /// Outcome per request id; 0 encodes a served response, otherwise the
    /// (negative) error code.
    audit: Mutex<Vec<i32>>,
    pub window: Mutex<ProbeWindow>,
}

impl SessionState {
    pub fn new(id: u64, limit: u64) -> Self {
        Self {
            id,
            limit,
            attempted: AtomicU64::new(0),
            served: AtomicU64::new(0),
            alerts: AtomicU64::new(0),
            errors: Mutex::new(Vec::new()),
            audit: Mutex::new(Vec::new()),
            window: Mutex::new(ProbeWindow::default()),
        }
    }

    /// Claims the next request id. The caller must follow up with exactly
    /// one `record_served`/`record_error` for it.
    pub fn begin_request(&self) -> u64 {
        self.attempted.fetch_add(1, Ordering::SeqCst) + 1
    }

    /// True once this request id is past the session's attempt cap.
    pub fn over_limit(&self, request_id: u64) -> bool {
        request_id > self.limit
    }

    pub fn record_served(&self, request_id: u64) {
        self.served.fetch_add(1, Ordering::SeqCst);
        self.push_audit(request_id, 0);
    }

    pub fn record_error(&self, request_id: u64, code: i32) {
        if code == ALERT_CODE {
            self.alerts.fetch_add(1, Ordering::SeqCst);
        }
        self.errors.lock().push((request_id, code));
        self.push_audit(request_id, code);
    }

    fn push_audit(&self, request_id: u64, code: i32) {
        let mut audit = self.audit.lock();
        // Concurrent callers may finish out of id order; keep the log
        // indexed by request id regardless.
        let idx = request_id as usize - 1;
        if audit.len() <= idx {
            audit.resize(idx + 1, i32::MIN);
        }
        audit[idx] = code;
    }

    pub fn audit_log(&self) -> Vec<(u64, AuditOutcome)> {
        self.audit
            .lock()
            .iter()
            .enumerate()
            .map(|(i, &code)| {
                let outcome = if code == 0 {
                    AuditOutcome::Served
                } else {
                    AuditOutcome::Errored(code)
                };
                (i as u64 + 1, outcome)
            })
            .collect()
    }

    pub fn stats(&self) -> SessionStats {
        let errors = self.errors.lock();
        let mut error_counts = BTreeMap::new();
        for &(_, code) in errors.iter() {
            *error_counts.entry(code).or_insert(0u64) += 1;
        }
        SessionStats {
            session_id: self.id,
            attempted: self.attempted.load(Ordering::SeqCst),
            served: self.served.load(Ordering::SeqCst),
            errored: errors.len() as u64,
            alerts_raised: self.alerts.load(Ordering::SeqCst),
            error_counts,
        }
    }

    pub fn errors_emitted(&self) -> Vec<(u64, i32)> {
        self.errors.lock().clone()
    }
}

/// Snapshot served over `GET /session/{id}/stats` and used by campaign-side
/// accounting checks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionStats {
    pub session_id: u64,
    pub attempted: u64,
    pub served: u64,
    pub errored: u64,
    pub alerts_raised: u64,
    /// Error code → number of times emitted.
    pub error_counts: BTreeMap<i32, u64>,
}

impl SessionStats {
    /// The conservation invariant.
    pub fn conserves(&self) -> bool {
        self.attempted == self.served + self.errored
    }
}
