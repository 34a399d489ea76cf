//! Simulated content-moderation scoring service.
//!
//! The service trains a hidden classifier on the synthetic corpus, wraps it
//! in per-category sigmoid calibration so responses look like independent
//! percent scores, and layers the operational behaviours an attacker has to
//! cope with: per-session rate limiting, an in-band error vocabulary, an
//! anomaly detector that answers suspicious inputs with an alert code, fault
//! injection, and scheduled model replacement.
//!
//! Two frontends share the same state: [`service::SessionHandle`] for
//! in-process callers and a small HTTP server ([`http`]) speaking JSON with
//! base64-packed images.

pub mod detector;
pub mod http;
pub mod policy;
pub mod service;
pub mod session;
pub mod wire;

pub use policy::{OraclePolicy, PolicyError};
pub use service::{OracleService, ServiceError, SessionHandle, UpdateReport};
pub use session::SessionStats;
