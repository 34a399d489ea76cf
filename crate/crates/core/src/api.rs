//! Client-side contract for the opaque scoring service: response and error
//! vocabulary, the `OracleApi` trait, and a budget-enforcing client wrapper.

use crate::tensor::Tensor;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use thiserror::Error;

pub use crate::zoo::CATEGORIES;

/// Classification of service error codes: `Runtime` errors are the caller's
/// fault (bad request), `System` errors are service-side conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Runtime,
    System,
}

/// The alert-class code: raised by the service's background anomaly
/// detector rather than by request handling.
pub const ALERT_CODE: i32 = -25;

/// Every error code the service can return, with its class and the exact
/// message text the wire format uses.
pub const ERROR_TABLE: [(i32, ErrorKind, &str); 14] = [
    (-7, ErrorKind::Runtime, "Invalid Command."),
    (-9, ErrorKind::Runtime, "Invalid Image Data"),
    (-10, ErrorKind::Runtime, "Invalid Category Id/s"),
    (-11, ErrorKind::System, "Cannot decode the image"),
    (-12, ErrorKind::System, "Unable to load Image Reader"),
    (-15, ErrorKind::System, "Unexpected error, please try again."),
    (-16, ErrorKind::System, "Error as returned by the scanning functionality"),
    (-17, ErrorKind::Runtime, "Invalid / Empty image URL"),
    (-20, ErrorKind::Runtime, "Database Error"),
    (-21, ErrorKind::Runtime, "Empty Image data from URL"),
    (-22, ErrorKind::System, "Failed to load IASSL library"),
    (-23, ErrorKind::System, "Error in daemon service"),
    (-25, ErrorKind::System, "Error by background service."),
    (-26, ErrorKind::Runtime, "Invalid JSON."),
];

pub fn error_kind(code: i32) -> Option<ErrorKind> {
    ERROR_TABLE.iter().find(|(c, _, _)| *c == code).map(|(_, k, _)| *k)
}

pub fn error_description(code: i32) -> Option<&'static str> {
    ERROR_TABLE.iter().find(|(c, _, _)| *c == code).map(|(_, _, d)| *d)
}

/// One service reply: either per-category percent scores or exactly one
/// error code, never both. Constructors enforce the exclusivity.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleResponse {
    pub request_id: u64,
    kind: ResponseKind,
}

#[derive(Debug, Clone, PartialEq)]
enum ResponseKind {
    Scores([f64; 5]),
    Error(i32),
}

impl OracleResponse {
    pub fn from_scores(request_id: u64, scores: [f64; 5]) -> Self {
        Self {
            request_id,
            kind: ResponseKind::Scores(scores),
        }
    }

    pub fn from_error(request_id: u64, code: i32) -> Self {
        Self {
            request_id,
            kind: ResponseKind::Error(code),
        }
    }

    pub fn error_code(&self) -> Option<i32> {
        match self.kind {
            ResponseKind::Error(code) => Some(code),
            ResponseKind::Scores(_) => None,
        }
    }

    pub fn is_alert(&self) -> bool {
        self.error_code() == Some(ALERT_CODE)
    }

    /// Category/percent pairs in canonical category order; empty for errors.
    pub fn per_category(&self) -> Vec<(&'static str, f64)> {
        match &self.kind {
            ResponseKind::Scores(s) => CATEGORIES.iter().copied().zip(s.iter().copied()).collect(),
            ResponseKind::Error(_) => Vec::new(),
        }
    }

    pub fn scores(&self) -> Option<&[f64; 5]> {
        match &self.kind {
            ResponseKind::Scores(s) => Some(s),
            ResponseKind::Error(_) => None,
        }
    }

    pub fn score(&self, category: &str) -> Option<f64> {
        let idx = CATEGORIES.iter().position(|c| *c == category)?;
        self.scores().map(|s| s[idx])
    }

    /// Highest-scoring category; ties resolve to the earlier category.
    pub fn top_category(&self) -> Option<(&'static str, f64)> {
        let s = self.scores()?;
        let idx = crate::zoo::argmax(s);
        Some((CATEGORIES[idx], s[idx]))
    }

    /// Categories at or above `threshold` percent. Monotone in `threshold`:
    /// raising it can only shrink the set.
    pub fn flagged(&self, threshold: f64) -> Vec<&'static str> {
        match &self.kind {
            ResponseKind::Scores(s) => CATEGORIES
                .iter()
                .zip(s)
                .filter(|(_, &v)| v >= threshold)
                .map(|(c, _)| *c)
                .collect(),
            ResponseKind::Error(_) => Vec::new(),
        }
    }
}

/// One classification session against the scoring service. Implementations
/// carry their own session identity; every call is one service request.
pub trait OracleApi: Send + Sync {
    fn classify(&self, image: &Tensor) -> OracleResponse;

    /// Stable identifier for reports.
    fn describe(&self) -> String {
        "oracle".into()
    }
}

#[derive(Debug, Error)]
#[error("query budget of {budget} exhausted (spent {spent})")]
pub struct BudgetExceeded {
    pub budget: u64,
    pub spent: u64,
}

/// Campaign-wide query ceiling shared across clients.
#[derive(Debug)]
pub struct GlobalBudget {
    cap: u64,
    spent: AtomicU64,
}

impl GlobalBudget {
    pub fn new(cap: u64) -> Arc<Self> {
        Arc::new(Self {
            cap,
            spent: AtomicU64::new(0),
        })
    }

    fn try_acquire(&self) -> bool {
        self.spent
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |s| {
                (s < self.cap).then_some(s + 1)
            })
            .is_ok()
    }

    pub fn spent(&self) -> u64 {
        self.spent.load(Ordering::SeqCst)
    }

    pub fn cap(&self) -> u64 {
        self.cap
    }

    pub fn remaining(&self) -> u64 {
        self.cap - self.spent().min(self.cap)
    }
}

/// Wraps an [`OracleApi`] session and refuses calls beyond the budget. The
/// reserve-then-call sequence uses a compare-and-swap loop, so the counter
/// is exact even when shared across threads: each successful `classify`
/// increments `spent` by exactly one.
pub struct OracleClient {
    api: Arc<dyn OracleApi>,
    budget: u64,
    spent: AtomicU64,
    ok_responses: AtomicU64,
    global: Option<Arc<GlobalBudget>>,
}

impl OracleClient {
    pub fn new(api: Arc<dyn OracleApi>, budget: u64) -> Self {
        Self {
            api,
            budget,
            spent: AtomicU64::new(0),
            ok_responses: AtomicU64::new(0),
            global: None,
        }
    }

    pub fn with_global(api: Arc<dyn OracleApi>, budget: u64, global: Arc<GlobalBudget>) -> Self {
        Self {
            global: Some(global),
            ..Self::new(api, budget)
        }
    }

    pub fn classify(&self, image: &Tensor) -> Result<OracleResponse, BudgetExceeded> {
        let reserved = self
            .spent
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |s| {
                (s < self.budget).then_some(s + 1)
            });
        if reserved.is_err() {
            return Err(BudgetExceeded {
                budget: self.budget,
                spent: self.spent.load(Ordering::SeqCst),
            });
        }
        if let Some(global) = &self.global {
            if !global.try_acquire() {
                self.spent.fetch_sub(1, Ordering::SeqCst);
                return Err(BudgetExceeded {
                    budget: global.cap(),
                    spent: global.spent(),
                });
            }
        }
        let response = self.api.classify(image);
        if response.error_code().is_none() {
            self.ok_responses.fetch_add(1, Ordering::SeqCst);
        }
        Ok(response)
    }

    /// Total calls made, including ones answered with an error code.
    pub fn spent(&self) -> u64 {
        self.spent.load(Ordering::SeqCst)
    }

    /// Calls that came back with scores.
    pub fn ok_responses(&self) -> u64 {
        self.ok_responses.load(Ordering::SeqCst)
    }

    pub fn remaining(&self) -> u64 {
        self.budget - self.spent().min(self.budget)
    }

    pub fn budget(&self) -> u64 {
        self.budget
    }

    pub fn api(&self) -> &Arc<dyn OracleApi> {
        &self.api
    }
}
