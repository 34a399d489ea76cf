//! Oracle backends. A campaign either builds the scoring service in
//! process or talks to one over HTTP; every attack sees the same
//! `OracleApi` either way, so the rest of the crate never branches on
//! transport.

use crate::config::OracleSection;
use atf_core::api::OracleApi;
use atf_oracle::http::{HttpError, HttpOracle};
use atf_oracle::session::SessionStats;
use atf_oracle::{OraclePolicy, OracleService, PolicyError, ServiceError, UpdateReport};
use std::path::Path;
use std::sync::Arc;

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("oracle unreachable at {0}")]
    Unreachable(String),
    #[error("oracle protocol error: {0}")]
    Protocol(String),
}

impl From<HttpError> for BackendError {
    fn from(e: HttpError) -> Self {
        match e {
            HttpError::Unreachable(url) => BackendError::Unreachable(url),
            other => BackendError::Protocol(other.to_string()),
        }
    }
}

impl BackendError {
    /// True when the cause is a dead or absent service rather than a bad
    /// request or bad configuration.
    pub fn is_unreachable(&self) -> bool {
        matches!(self, BackendError::Unreachable(_))
    }
}

pub enum Backend {
    InProcess(Arc<OracleService>),
    Http(String),
}

impl std::fmt::Debug for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Backend({})", self.describe())
    }
}

impl Backend {
    /// Builds the backend the config names. In-process mode trains the
    /// hidden model here, which takes a few seconds at default policy.
    pub fn from_config(cfg: &OracleSection) -> Result<Backend, BackendError> {
        match cfg.mode.as_str() {
            "http" => Ok(Backend::Http(cfg.url.clone())),
            _ => {
                let policy = if cfg.policy.is_empty() {
                    OraclePolicy::default()
                } else {
                    OraclePolicy::load(Path::new(&cfg.policy))?
                };
                Ok(Backend::InProcess(OracleService::build(policy)?))
            }
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Backend::InProcess(svc) => {
                format!("in-process (model v{})", svc.model_version())
            }
            Backend::Http(url) => url.clone(),
        }
    }

    /// The flagging threshold, when this side can know it authoritatively.
    /// Remote services do not advertise theirs; callers fall back to the
    /// configured belief.
    pub fn threshold_percent(&self) -> Option<f64> {
        match self {
            Backend::InProcess(svc) => Some(svc.policy().threshold_percent),
            Backend::Http(_) => None,
        }
    }

    /// Opens a fresh session. For HTTP this is where connectivity is
    /// established, so an unreachable service surfaces here.
    pub fn open_session(&self) -> Result<Session, BackendError> {
        match self {
            Backend::InProcess(svc) => Ok(Session::InProcess {
                service: svc.clone(),
                handle: Arc::new(svc.handle()),
            }),
            Backend::Http(url) => Ok(Session::Http {
                handle: Arc::new(HttpOracle::connect(url)?),
            }),
        }
    }
}

/// One oracle session plus the means to query and account for it.
pub enum Session {
    InProcess {
        service: Arc<OracleService>,
        handle: Arc<SessionHandle>,
    },
    Http {
        handle: Arc<HttpOracle>,
    },
}

use atf_oracle::SessionHandle;

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Session({})", self.id())
    }
}

impl Session {
    pub fn api(&self) -> Arc<dyn OracleApi> {
        match self {
            Session::InProcess { handle, .. } => handle.clone(),
            Session::Http { handle } => handle.clone(),
        }
    }

    pub fn id(&self) -> u64 {
        match self {
            Session::InProcess { handle, .. } => handle.session_id(),
            Session::Http { handle } => handle.session_id(),
        }
    }

    pub fn stats(&self) -> Result<SessionStats, BackendError> {
        match self {
            Session::InProcess { handle, .. } => Ok(handle.stats()),
            Session::Http { handle } => Ok(handle.stats()?),
        }
    }

    /// Forces a model swap on the service. Used by persistence checks.
    pub fn force_update(&self) -> Result<UpdateReport, BackendError> {
        match self {
            Session::InProcess { service, .. } => Ok(service.force_update()?),
            Session::Http { handle } => Ok(handle.force_update()?),
        }
    }

    /// Closes an in-process session so the service can drop its audit
    /// buffers. Remote sessions have no close verb; they just go idle after
    /// a final stats snapshot.
    pub fn retire(&self) -> Option<SessionStats> {
        match self {
            Session::InProcess { service, handle } => service.close_session(handle.session_id()),
            Session::Http { handle } => handle.stats().ok(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::CampaignConfig;

    fn tiny_backend() -> Backend {
        let policy = OraclePolicy {
            per_class: 8,
            epochs: 2,
            detector_enabled: false,
            ..OraclePolicy::default()
        };
        Backend::InProcess(OracleService::build(policy).unwrap())
    }

    #[test]
    fn in_process_sessions_classify_and_retire() {
        let backend = tiny_backend();
        assert_eq!(backend.threshold_percent(), Some(50.0));
        let session = backend.open_session().unwrap();
        let api = session.api();
        let image = atf_core::tensor::Tensor::zeros(&[1, 28, 28]);
        let response = api.classify(&image);
        assert!(response.scores().is_some());
        let stats = session.stats().unwrap();
        assert_eq!(stats.served, 1);
        let closed = session.retire().expect("in-process close returns stats");
        assert_eq!(closed.served, 1);
        // Retired sessions refuse further queries in-band.
        assert_eq!(api.classify(&image).error_code(), Some(-15));
    }

    #[test]
    fn http_mode_without_server_is_unreachable() {
        let cfg = CampaignConfig::from_toml_str(
            "[oracle]\nmode = \"http\"\nurl = \"http://127.0.0.1:1\"\n",
        )
        .unwrap();
        let backend = Backend::from_config(&cfg.oracle).unwrap();
        assert!(backend.threshold_percent().is_none());
        let err = backend.open_session().expect_err("nothing listens on :1");
        assert!(err.is_unreachable(), "got {err:?}");
    }

    #[test]
    fn missing_policy_file_is_a_policy_error() {
        let cfg = CampaignConfig::from_toml_str(
            "[oracle]\npolicy = \"/nonexistent/policy.toml\"\n",
        )
        .unwrap();
        let err = Backend::from_config(&cfg.oracle).expect_err("no such file");
        assert!(matches!(err, BackendError::Policy(_)));
        assert!(!err.is_unreachable());
    }

    #[test]
    fn session_force_update_bumps_version() {
        let backend = tiny_backend();
        let session = backend.open_session().unwrap();
        let report = session.force_update().unwrap();
        assert_eq!(report.version, 2);
        assert!((0.0..=1.0).contains(&report.clean_consistency));
    }
}
