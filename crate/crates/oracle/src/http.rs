//! HTTP frontend and client.
//!
//! Server: `POST /session` opens a session, `POST /classify` scores one
//! image, `GET /session/{id}/stats` reads accounting, `POST /admin/update`
//! forces a model swap, `GET /healthz` reports liveness. Application-level
//! failures are in-band JSON error codes with HTTP status 200; only
//! transport and routing problems use HTTP status semantics.
//!
//! Client: [`HttpOracle`] speaks that protocol behind the same `OracleApi`
//! trait the in-process handle implements, so attack code cannot tell the
//! difference. Transport failures surface in-band as code −23.

use crate::service::{OracleService, UpdateReport};
use crate::session::SessionStats;
use crate::wire::{self, VettedRequest};
use atf_core::api::{OracleApi, OracleResponse};
use atf_core::tensor::Tensor;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HttpError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        source: std::io::Error,
    },
    #[error("server thread failed to start")]
    ServerDied,
    #[error("service unreachable at {0}")]
    Unreachable(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

fn json_200(body: String) -> Response {
    (
        StatusCode::OK,
        [(header::CONTENT_TYPE, "application/json")],
        body,
    )
        .into_response()
}

async fn open_session(State(svc): State<Arc<OracleService>>) -> Response {
    let id = svc.open_session();
    json_200(format!("{{\"session\":{id}}}"))
}

async fn classify(State(svc): State<Arc<OracleService>>, body: String) -> Response {
    let response = match wire::vet_request(&body) {
        VettedRequest::Reject(code) => OracleResponse::from_error(0, code),
        VettedRequest::Classify { session, pixels } => svc.classify_pixels(session, &pixels),
    };
    json_200(wire::render_response(&response))
}

async fn session_stats(
    State(svc): State<Arc<OracleService>>,
    Path(id): Path<u64>,
) -> Response {
    match svc.session_stats(id) {
        Some(stats) => json_200(serde_json::to_string(&stats).expect("stats serialize")),
        None => StatusCode::NOT_FOUND.into_response(),
    }
}

async fn admin_update(State(svc): State<Arc<OracleService>>) -> Response {
    // Retraining takes a second or two; done inline, the simulator has no
    // latency SLO.
    match svc.force_update() {
        Ok(report) => json_200(serde_json::to_string(&report).expect("report serialize")),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

async fn healthz(State(svc): State<Arc<OracleService>>) -> Response {
    json_200(format!(
        "{{\"ok\":true,\"model_version\":{}}}",
        svc.model_version()
    ))
}

fn router(service: Arc<OracleService>) -> Router {
    Router::new()
        .route("/session", post(open_session))
        .route("/classify", post(classify))
        .route("/session/{id}/stats", get(session_stats))
        .route("/admin/update", post(admin_update))
        .route("/healthz", get(healthz))
        .with_state(service)
}

/// A running server; dropping it shuts the listener down.
pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) {
        self.stop_inner();
    }

    fn stop_inner(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_inner();
    }
}

/// Binds `service.policy().bind` on a background thread and returns once the
/// listener is live.
pub fn spawn(service: Arc<OracleService>) -> Result<ServerHandle, HttpError> {
    let bind = service.policy().bind.clone();
    let (addr_tx, addr_rx) = std::sync::mpsc::channel();
    let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();

    let thread = std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_current_thread()
            .enable_io()
            .build()
            .expect("tokio runtime");
        rt.block_on(async move {
            let listener = match tokio::net::TcpListener::bind(&bind).await {
                Ok(l) => l,
                Err(e) => {
                    let _ = addr_tx.send(Err((bind, e)));
                    return;
                }
            };
            let addr = listener.local_addr().expect("bound listener has an addr");
            let _ = addr_tx.send(Ok(addr));
            let serve = axum::serve(listener, router(service)).with_graceful_shutdown(async {
                let _ = stop_rx.await;
            });
            if let Err(e) = serve.await {
                eprintln!("oracle http server stopped: {e}");
            }
        });
    });

    match addr_rx.recv() {
        Ok(Ok(addr)) => Ok(ServerHandle {
            addr,
            shutdown: Some(stop_tx),
            thread: Some(thread),
        }),
        Ok(Err((addr, source))) => Err(HttpError::Bind { addr, source }),
        Err(_) => Err(HttpError::ServerDied),
    }
}

/// `oracle serve`: runs until killed, announcing the bound address on
/// stdout.
pub fn serve_blocking(service: Arc<OracleService>) -> Result<(), HttpError> {
    let handle = spawn(service)?;
    println!("oracle listening on http://{}", handle.addr);
    loop {
        std::thread::sleep(Duration::from_secs(3600));
    }
}

/// Blocking HTTP client bound to one remote session.
pub struct HttpOracle {
    base: String,
    client: reqwest::blocking::Client,
    session: u64,
}

impl HttpOracle {
    /// Health-checks the service and opens a session. Failure here is the
    /// "oracle unreachable" condition.
    pub fn connect(base_url: &str) -> Result<Self, HttpError> {
        let base = base_url.trim_end_matches('/').to_string();
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| HttpError::Protocol(e.to_string()))?;
        let health = client
            .get(format!("{base}/healthz"))
            .send()
            .map_err(|_| HttpError::Unreachable(base.clone()))?;
        if !health.status().is_success() {
            return Err(HttpError::Unreachable(base));
        }
        let opened = client
            .post(format!("{base}/session"))
            .send()
            .and_then(|r| r.text())
            .map_err(|_| HttpError::Unreachable(base.clone()))?;
        let opened: serde_json::Value =
            serde_json::from_str(&opened).map_err(|e| HttpError::Protocol(e.to_string()))?;
        let session = opened["session"]
            .as_u64()
            .ok_or_else(|| HttpError::Protocol("missing session id".into()))?;
        Ok(Self {
            base,
            client,
            session,
        })
    }

    pub fn session_id(&self) -> u64 {
        self.session
    }

    pub fn stats(&self) -> Result<SessionStats, HttpError> {
        let text = self
            .client
            .get(format!("{}/session/{}/stats", self.base, self.session))
            .send()
            .and_then(|r| r.text())
            .map_err(|_| HttpError::Unreachable(self.base.clone()))?;
        serde_json::from_str(&text).map_err(|e| HttpError::Protocol(e.to_string()))
    }

    pub fn force_update(&self) -> Result<UpdateReport, HttpError> {
        let text = self
            .client
            .post(format!("{}/admin/update", self.base))
            .send()
            .and_then(|r| r.text())
            .map_err(|_| HttpError::Unreachable(self.base.clone()))?;
        serde_json::from_str(&text).map_err(|e| HttpError::Protocol(e.to_string()))
    }

    fn post_classify(&self, image: &Tensor) -> Result<OracleResponse, ()> {
        let body = format!(
            "{{\"command\":\"classify\",\"session\":{},\"image\":\"{}\",\"shape\":[1,28,28]}}",
            self.session,
            wire::encode_image(image)
        );
        let text = self
            .client
            .post(format!("{}/classify", self.base))
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body)
            .send()
            .and_then(|r| r.text())
            .map_err(|_| ())?;
        wire::parse_response(&text).ok_or(())
    }
}

impl OracleApi for HttpOracle {
    fn classify(&self, image: &Tensor) -> OracleResponse {
        self.post_classify(image)
            .unwrap_or_else(|_| OracleResponse::from_error(0, -23))
    }

    fn describe(&self) -> String {
        format!("{}/session-{}", self.base, self.session)
    }
}
