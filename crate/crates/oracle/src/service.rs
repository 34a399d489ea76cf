//! The scoring service itself: hidden model, per-category sigmoid
//! calibration, request pipeline, sessions, and scheduled model swaps.

use crate::detector::DetectorCalibration;
use crate::policy::OraclePolicy;
use crate::session::{SessionState, SessionStats};
use atf_core::api::{OracleApi, OracleResponse, ALERT_CODE};
use atf_core::tensor::Tensor;
use atf_core::zoo::{
    argmax, hidden_classifier_spec, synth_dataset, train, Dataset, SurrogateModel, TrainError,
    CATEGORIES,
};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use thiserror::Error;

/// Number of pixels every image must carry.
const IMAGE_LEN: usize = 784;
const IMAGE_SHAPE: [usize; 3] = [1, 28, 28];

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("hidden model training failed: {0}")]
    Train(#[from] TrainError),
    #[error("model evaluation failed: {0}")]
    Graph(#[from] atf_core::graph::GraphError),
    #[error("calibration produced no data for category {0}")]
    EmptyCalibration(usize),
}

/// Sigmoid mapping one raw category logit to a percent score. `threshold_z`
/// is the logit at which the score crosses 50; `scale` fixes how fast it
/// saturates.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SigmoidCalibration {
    pub threshold_z: f64,
    pub scale: f64,
}

impl SigmoidCalibration {
    pub fn percent(&self, z: f64) -> f64 {
        let x = self.scale * (z - self.threshold_z);
        let sigma = 1.0 / (1.0 + (-x).exp());
        round5(100.0 * sigma)
    }
}

/// Scores are rendered (and therefore compared) at five decimal places;
/// rounding here keeps the in-process and wire views identical.
pub fn round5(v: f64) -> f64 {
    (v * 1e5).round() / 1e5
}

/// Everything that swaps atomically on retraining.
struct ModelState {
    model: SurrogateModel,
    sigmoid: [SigmoidCalibration; 5],
    detector: DetectorCalibration,
    version: u64,
}

impl ModelState {
    fn logits(&self, image: &Tensor) -> Result<Vec<f64>, ServiceError> {
        Ok(self.model.graph.forward_logits(image)?.data().to_vec())
    }

    fn percents(&self, image: &Tensor) -> Result<[f64; 5], ServiceError> {
        let z = self.logits(image)?;
        let mut out = [0.0; 5];
        for (i, cal) in self.sigmoid.iter().enumerate() {
            out[i] = cal.percent(z[i]);
        }
        Ok(out)
    }
}

/// Measurements taken right after (re)calibration; frozen into tests.
#[derive(Debug, Clone, Serialize)]
pub struct CalibrationSummary {
    /// Accuracy on the held-out block the trainer never saw.
    pub holdout_accuracy: f64,
    /// Fraction of held-out samples whose own category scores above 50.
    pub holdout_flagged_own: f64,
    /// Highest category percent for the all-zero baseline image.
    pub baseline_max_percent: f64,
    /// Detector false-fire rate on the held-out clean images.
    pub clean_fire_rate: f64,
}

/// Result of one model swap.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UpdateReport {
    /// Model version now serving (starts at 1, +1 per swap).
    pub version: u64,
    /// Fraction of held-out clean images whose predicted class is unchanged.
    pub clean_consistency: f64,
    pub holdout_accuracy: f64,
}

pub struct OracleService {
    policy: OraclePolicy,
    state: RwLock<Arc<ModelState>>,
    data: Dataset,
    /// Same distribution, fresh seed: the model never trains on these, so
    /// calibration sees honest unseen-logit statistics.
    calib_data: Dataset,
    holdout_idx: Vec<usize>,
    summary: CalibrationSummary,
    sessions: RwLock<BTreeMap<u64, SessionEntry>>,
    next_session: AtomicU64,
    total_attempted: AtomicU64,
    total_served: AtomicU64,
    /// Serialises retraining; classification never blocks on it.
    update_gate: Mutex<()>,
}

/// Closed sessions collapse to their final stats so long campaigns do not
/// accumulate audit buffers for sessions nobody can query any more.
enum SessionEntry {
    Live(Arc<SessionState>),
    Closed(SessionStats),
}

impl OracleService {
    /// Trains the hidden classifier and calibrates scores and detector.
    /// Slowest call in the crate (a couple of seconds at default policy).
    pub fn build(policy: OraclePolicy) -> Result<Arc<Self>, ServiceError> {
        let data = synth_dataset(policy.data_seed, policy.per_class);
        let calib_data = synth_dataset(policy.data_seed.wrapping_add(101), policy.per_class);
        let (_, holdout_idx) = data.split_blocks(5, 4);

        let (model, report) = train(&hidden_classifier_spec(), &data, policy.epochs, policy.seed)?;
        let (sigmoid, detector) = calibrate(&model, &calib_data, &policy)?;
        let state = Arc::new(ModelState {
            model,
            sigmoid,
            detector,
            version: 1,
        });
        let summary = summarize(&state, &data, &holdout_idx, report.held_out_accuracy)?;

        Ok(Arc::new(Self {
            policy,
            state: RwLock::new(state),
            data,
            calib_data,
            holdout_idx,
            summary,
            sessions: RwLock::new(BTreeMap::new()),
            next_session: AtomicU64::new(1),
            total_attempted: AtomicU64::new(0),
            total_served: AtomicU64::new(0),
            update_gate: Mutex::new(()),
        }))
    }

    pub fn policy(&self) -> &OraclePolicy {
        &self.policy
    }

    pub fn calibration_summary(&self) -> &CalibrationSummary {
        &self.summary
    }

    pub fn model_version(&self) -> u64 {
        self.state.read().version
    }

    pub fn open_session(&self) -> u64 {
        let id = self.next_session.fetch_add(1, Ordering::SeqCst);
        let state = Arc::new(SessionState::new(id, self.policy.max_queries_per_session));
        self.sessions.write().insert(id, SessionEntry::Live(state));
        id
    }

    /// Retires the session: its buffers are dropped but the final stats stay
    /// readable. Further classify calls on the id fail like an unknown one.
    pub fn close_session(&self, id: u64) -> Option<SessionStats> {
        let mut sessions = self.sessions.write();
        let stats = match sessions.get(&id) {
            Some(SessionEntry::Live(s)) => s.stats(),
            Some(SessionEntry::Closed(stats)) => return Some(stats.clone()),
            None => return None,
        };
        sessions.insert(id, SessionEntry::Closed(stats.clone()));
        Some(stats)
    }

    pub fn session_stats(&self, id: u64) -> Option<SessionStats> {
        match self.sessions.read().get(&id) {
            Some(SessionEntry::Live(s)) => Some(s.stats()),
            Some(SessionEntry::Closed(stats)) => Some(stats.clone()),
            None => None,
        }
    }

    /// In-process entry point. Wire callers go through [`classify_pixels`]
    /// so that malformed payloads share the same accounting.
    ///
    /// [`classify_pixels`]: OracleService::classify_pixels
    pub fn classify(&self, session_id: u64, image: &Tensor) -> OracleResponse {
        self.classify_pixels(session_id, image.data())
    }

    /// Full request pipeline. Order is part of the contract: attempt
    /// accounting, rate limit, fault injection, payload validation,
    /// detector, scores.
    pub fn classify_pixels(&self, session_id: u64, pixels: &[f64]) -> OracleResponse {
        let session = match self.sessions.read().get(&session_id) {
            Some(SessionEntry::Live(s)) => s.clone(),
            // Unknown or retired session: nothing to account against.
            Some(SessionEntry::Closed(_)) | None => return OracleResponse::from_error(0, -15),
        };
        let rid = session.begin_request();
        let nth = self.total_attempted.fetch_add(1, Ordering::SeqCst) + 1;

        if session.over_limit(rid) {
            session.record_error(rid, -15);
            return OracleResponse::from_error(rid, -15);
        }
        if self.policy.fault_every > 0 && nth % self.policy.fault_every == 0 {
            session.record_error(rid, -20);
            return OracleResponse::from_error(rid, -20);
        }
        if pixels.len() != IMAGE_LEN || pixels.iter().any(|v| !v.is_finite()) {
            session.record_error(rid, -9);
            return OracleResponse::from_error(rid, -9);
        }
        let image = Tensor::new(pixels.to_vec(), IMAGE_SHAPE.to_vec()).expect("finite checked");

        let state = self.state.read().clone();
        if self.policy.detector_enabled {
            let mut window = session.window.lock();
            let probing = window.matches(&image, state.detector.rmsd_window) >= crate::detector::MATCHES_TO_FIRE;
            window.push(image.clone());
            drop(window);
            if probing || state.detector.fires_on(&image) {
                session.record_error(rid, ALERT_CODE);
                return OracleResponse::from_error(rid, ALERT_CODE);
            }
        }

        let scores = match state.percents(&image) {
            Ok(s) => s,
            Err(_) => {
                session.record_error(rid, -9);
                return OracleResponse::from_error(rid, -9);
            }
        };
        session.record_served(rid);
        let served = self.total_served.fetch_add(1, Ordering::SeqCst) + 1;
        if self.policy.update_after_queries > 0 && served % self.policy.update_after_queries == 0 {
            // Scheduled swap happens after the triggering request is
            // answered; failures leave the current model serving.
            let _ = self.retrain();
        }
        OracleResponse::from_scores(rid, scores)
    }

    /// Retrains the hidden model with a fresh seed and swaps it in
    /// atomically. Returns how consistent the new model is with the old one
    /// on held-out clean data.
    pub fn force_update(&self) -> Result<UpdateReport, ServiceError> {
        self.retrain()
    }

    fn retrain(&self) -> Result<UpdateReport, ServiceError> {
        let _gate = self.update_gate.lock();
        let old = self.state.read().clone();
        let version = old.version + 1;
        let seed = self.policy.seed.wrapping_add(7919 * version);
        let (model, report) = train(&hidden_classifier_spec(), &self.data, self.policy.epochs, seed)?;
        let (sigmoid, detector) = calibrate(&model, &self.calib_data, &self.policy)?;
        let fresh = Arc::new(ModelState {
            model,
            sigmoid,
            detector,
            version,
        });

        let mut agree = 0usize;
        for &i in &self.holdout_idx {
            let img = &self.data.samples[i].image;
            if argmax(&old.logits(img)?) == argmax(&fresh.logits(img)?) {
                agree += 1;
            }
        }
        let clean_consistency = if self.holdout_idx.is_empty() {
            1.0
        } else {
            agree as f64 / self.holdout_idx.len() as f64
        };

        *self.state.write() = fresh;
        Ok(UpdateReport {
            version,
            clean_consistency,
            holdout_accuracy: report.held_out_accuracy,
        })
    }

    /// Opens a session and binds it to an [`OracleApi`] handle.
    pub fn handle(self: &Arc<Self>) -> SessionHandle {
        let session = self.open_session();
        SessionHandle {
            service: self.clone(),
            session,
        }
    }
}

/// One in-process session speaking the client trait.
pub struct SessionHandle {
    service: Arc<OracleService>,
    session: u64,
}

impl SessionHandle {
    pub fn session_id(&self) -> u64 {
        self.session
    }

    pub fn service(&self) -> &Arc<OracleService> {
        &self.service
    }

    pub fn stats(&self) -> SessionStats {
        self.service
            .session_stats(self.session)
            .expect("own session exists")
    }
}

impl OracleApi for SessionHandle {
    fn classify(&self, image: &Tensor) -> OracleResponse {
        self.service.classify(self.session, image)
    }

    fn describe(&self) -> String {
        format!("in-process/session-{}", self.session)
    }
}

fn calibrate(
    model: &SurrogateModel,
    calib: &Dataset,
    policy: &OraclePolicy,
) -> Result<([SigmoidCalibration; 5], DetectorCalibration), ServiceError> {
    use atf_core::metrics::percentile;

    let mut logit_rows = Vec::with_capacity(calib.samples.len());
    for s in &calib.samples {
        let z = model.graph.forward_logits(&s.image)?;
        logit_rows.push((s.label, z.data().to_vec()));
    }
    // The one input whose scores the contract pins: the all-zero baseline
    // must sit below 50 everywhere. (Uniform noise excites the raw-range
    // model as strongly as real content, so noise scores are left to the
    // model — only the detector behaviour for noise is specified.)
    let baseline = Tensor::new(vec![0.0; IMAGE_LEN], IMAGE_SHAPE.to_vec()).unwrap();
    let baseline_z = model.graph.forward_logits(&baseline)?.data().to_vec();

    let mut sigmoid = [SigmoidCalibration {
        threshold_z: 0.0,
        scale: 1.0,
    }; 5];
    for c in 0..CATEGORIES.len() {
        let pos: Vec<f64> = logit_rows
            .iter()
            .filter(|(label, _)| *label == c)
            .map(|(_, z)| z[c])
            .collect();
        let neg: Vec<f64> = logit_rows
            .iter()
            .filter(|(label, _)| *label != c)
            .map(|(_, z)| z[c])
            .collect();
        if pos.is_empty() || neg.is_empty() {
            return Err(ServiceError::EmptyCalibration(c));
        }

        // 50% crossing just under where positives begin, but never below
        // the worst off-category/baseline level; steepness set so a median
        // positive lands at 99.99.
        let hi = percentile(&pos, 5.0).expect("nonempty");
        let med = percentile(&pos, 50.0).expect("nonempty");
        let lo = percentile(&neg, 98.0)
            .expect("nonempty")
            .max(baseline_z[c] + 0.5);
        let threshold_z = if hi - 1.0 > lo { hi - 1.0 } else { lo + 0.25 };
        let scale = (9999.0f64).ln() / (med - threshold_z).max(0.5);
        sigmoid[c] = SigmoidCalibration { threshold_z, scale };
    }

    let clean: Vec<&Tensor> = calib.samples.iter().map(|s| &s.image).collect();
    let detector = DetectorCalibration::from_clean(&clean, policy.detector_rmsd_window);
    Ok((sigmoid, detector))
}

fn summarize(
    state: &ModelState,
    data: &Dataset,
    holdout_idx: &[usize],
    holdout_accuracy: f64,
) -> Result<CalibrationSummary, ServiceError> {
    let mut flagged_own = 0usize;
    let mut fired = 0usize;
    for &i in holdout_idx {
        let sample = &data.samples[i];
        if state.percents(&sample.image)?[sample.label] > 50.0 {
            flagged_own += 1;
        }
        if state.detector.fires_on(&sample.image) {
            fired += 1;
        }
    }
    let baseline = Tensor::new(vec![0.0; IMAGE_LEN], IMAGE_SHAPE.to_vec()).unwrap();
    let baseline_max = state
        .percents(&baseline)?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    let n = holdout_idx.len().max(1) as f64;
    Ok(CalibrationSummary {
        holdout_accuracy,
        holdout_flagged_own: flagged_own as f64 / n,
        baseline_max_percent: baseline_max,
        clean_fire_rate: fired as f64 / n,
    })
}
