//! Campaign orchestration: probes a scoring service for sensitivity and
//! error behaviour, ranks the available attacks under a threat model, runs
//! them sample by sample through budget-gated clients, and emits reports.

pub mod backend;
pub mod config;
pub mod probe;
pub mod recorder;
pub mod report;
pub mod runner;
pub mod selector;

pub use backend::{Backend, BackendError, Session};
pub use config::{CampaignConfig, ConfigError};
pub use probe::{probe_sensitivity, Distortion, ProbeError, ProbeReport};
pub use recorder::{ErrorEntry, ErrorRecord};
pub use report::AttackReport;
pub use runner::{run_campaign, CampaignError};
pub use selector::{select_attack, SelectionContext, DECLARED_ORDER};
