//! End-to-end behavioural contract for the simulated moderation service:
//! error surface, calibration floors, detector, accounting, scheduled model
//! swaps, and the HTTP front end.

use atf_core::api::{ErrorKind, OracleApi, ERROR_TABLE};
use atf_core::attack::{fgsm, ifgsm, AttackParams};
use atf_core::tensor::Tensor;
use atf_core::zoo::{bank_specs, synth_dataset, train, Dataset};
use atf_oracle::http::{spawn, HttpOracle};
use atf_oracle::{OraclePolicy, OracleService};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::sync::{Arc, LazyLock};

/// Shared default-policy service. Tests that mutate the model (updates)
/// build their own instance instead.
static SERVICE: LazyLock<Arc<OracleService>> =
    LazyLock::new(|| OracleService::build(OraclePolicy::default()).expect("service builds"));

static DATA: LazyLock<(Dataset, Vec<usize>)> = LazyLock::new(|| {
    let data = synth_dataset(7, 80);
    let (_, holdout) = data.split_blocks(5, 4);
    (data, holdout)
});

fn noise_image(rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(
        (0..784).map(|_| rng.random_range(0.0..255.0)).collect(),
        vec![1, 28, 28],
    )
    .unwrap()
}

fn small_policy() -> OraclePolicy {
    OraclePolicy {
        per_class: 8,
        epochs: 2,
        detector_enabled: false,
        ..OraclePolicy::default()
    }
}

#[test]
fn error_table_is_exact() {
    use ErrorKind::{Runtime, System};
    let expected: [(i32, ErrorKind, &str); 14] = [
        (-7, Runtime, "Invalid Command."),
        (-9, Runtime, "Invalid Image Data"),
        (-10, Runtime, "Invalid Category Id/s"),
        (-11, System, "Cannot decode the image"),
        (-12, System, "Unable to load Image Reader"),
        (-15, System, "Unexpected error, please try again."),
        (-16, System, "Error as returned by the scanning functionality"),
        (-17, Runtime, "Invalid / Empty image URL"),
        (-20, Runtime, "Database Error"),
        (-21, Runtime, "Empty Image data from URL"),
        (-22, System, "Failed to load IASSL library"),
        (-23, System, "Error in daemon service"),
        (-25, System, "Error by background service."),
        (-26, Runtime, "Invalid JSON."),
    ];
    assert_eq!(ERROR_TABLE.len(), expected.len());
    for ((c, k, m), (ec, ek, em)) in ERROR_TABLE.iter().zip(expected.iter()) {
        assert_eq!(c, ec);
        assert_eq!(k, ek);
        assert_eq!(m, em);
    }
}

#[test]
fn calibration_floors_hold() {
    let s = SERVICE.calibration_summary();
    assert!(
        s.holdout_flagged_own >= 0.95,
        "held-out images must score their own category above the threshold: {}",
        s.holdout_flagged_own
    );
    assert!(s.holdout_accuracy >= 0.90, "accuracy {}", s.holdout_accuracy);
    assert!(
        s.baseline_max_percent < 50.0,
        "all-zeros baseline must stay unflagged: {}",
        s.baseline_max_percent
    );
    assert!(s.clean_fire_rate <= 0.02, "clean alert rate {}", s.clean_fire_rate);

    // Same facts observed live rather than via the summary.
    let h = SERVICE.handle();
    let zeros = Tensor::new(vec![0.0; 784], vec![1, 28, 28]).unwrap();
    let r = h.classify(&zeros);
    let scores = r.scores().expect("baseline is served");
    assert!(scores.iter().all(|&v| v < 50.0), "{scores:?}");
}

#[test]
fn clean_holdout_served_without_alerts() {
    let (data, holdout) = &*DATA;
    let h = SERVICE.handle();
    let mut flagged_own = 0usize;
    for &i in holdout {
        let sample = &data.samples[i];
        let r = h.classify(&sample.image);
        assert!(!r.is_alert(), "clean image {i} tripped the detector");
        let scores = r.scores().expect("clean image is served");
        if scores[sample.label] > 50.0 {
            flagged_own += 1;
        }
    }
    assert!(flagged_own as f64 / holdout.len() as f64 >= 0.95);
    assert_eq!(h.stats().alerts_raised, 0);
}

#[test]
fn noise_images_never_alert() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA11CE);
    let h = SERVICE.handle();
    for _ in 0..100 {
        let r = h.classify(&noise_image(&mut rng));
        assert!(!r.is_alert(), "noise must not look like an attack probe");
        assert!(r.scores().is_some());
    }
    let stats = h.stats();
    assert_eq!(stats.alerts_raised, 0);
    assert_eq!(stats.served, 100);
}

#[test]
fn rate_limit_counts_attempts_exactly() {
    let policy = OraclePolicy {
        max_queries_per_session: 10,
        ..small_policy()
    };
    let service = OracleService::build(policy).unwrap();
    let session = service.open_session();
    let zeros = vec![0.0; 784];
    for i in 1..=13u64 {
        let r = service.classify_pixels(session, &zeros);
        assert_eq!(r.request_id, i);
        if i <= 10 {
            assert!(r.scores().is_some(), "request {i} should be served");
        } else {
            assert_eq!(r.error_code(), Some(-15), "request {i} is over the cap");
        }
    }
    let stats = service.session_stats(session).unwrap();
    assert_eq!(stats.attempted, 13);
    assert_eq!(stats.served, 10);
    assert_eq!(stats.errored, 3);
    assert!(stats.conserves());
    assert_eq!(stats.error_counts.get(&-15), Some(&3));
}

#[test]
fn fault_injection_hits_every_nth_request() {
    let policy = OraclePolicy {
        fault_every: 5,
        ..small_policy()
    };
    let service = OracleService::build(policy).unwrap();
    let session = service.open_session();
    let zeros = vec![0.0; 784];
    let mut faults = Vec::new();
    for i in 1..=20u64 {
        let r = service.classify_pixels(session, &zeros);
        if r.error_code() == Some(-20) {
            faults.push(i);
        } else {
            assert!(r.scores().is_some());
        }
    }
    assert_eq!(faults, vec![5, 10, 15, 20]);
    let stats = service.session_stats(session).unwrap();
    assert!(stats.conserves());
    assert_eq!(stats.error_counts.get(&-20), Some(&4));
}

#[test]
fn malformed_pixels_rejected_in_band() {
    let session = SERVICE.open_session();
    let short = vec![0.0; 100];
    assert_eq!(SERVICE.classify_pixels(session, &short).error_code(), Some(-9));
    let mut nan = vec![0.0; 784];
    nan[3] = f64::NAN;
    assert_eq!(SERVICE.classify_pixels(session, &nan).error_code(), Some(-9));
    let mut inf = vec![0.0; 784];
    inf[700] = f64::INFINITY;
    assert_eq!(SERVICE.classify_pixels(session, &inf).error_code(), Some(-9));
    let stats = SERVICE.session_stats(session).unwrap();
    assert_eq!(stats.errored, 3);
    assert!(stats.conserves());
}

#[test]
fn single_pixel_probe_sequence_trips_detector() {
    let (data, holdout) = &*DATA;
    let base = &data.samples[holdout[0]].image;
    let session = SERVICE.open_session();

    // The base image plus a run of single-pixel finite-difference probes:
    // the first three nearly-identical images pass, everything after is
    // answered with the alert code for the rest of the session.
    assert!(SERVICE.classify_pixels(session, base.data()).scores().is_some());
    let mut alerts = Vec::new();
    for i in 0..9 {
        let mut px = base.data().to_vec();
        px[i * 37] += 8.0;
        let r = SERVICE.classify_pixels(session, &px);
        if r.is_alert() {
            alerts.push(i);
        }
    }
    assert_eq!(alerts, (2..9).collect::<Vec<_>>(), "two probes pass, then all alert");

    // Still alerting later in the same session, even for the base image.
    assert!(SERVICE.classify_pixels(session, base.data()).is_alert());
    let stats = SERVICE.session_stats(session).unwrap();
    assert_eq!(stats.alerts_raised, 8);
    assert!(stats.conserves());
}

#[test]
fn sign_attack_images_trip_detector() {
    let (data, holdout) = &*DATA;
    let spec = &bank_specs()[1];
    let (surrogate, _) = train(spec, &synth_dataset(7, 32), 24, 11).unwrap();

    for (name, iterations, step_size) in [("one-shot", 1usize, 16.0), ("iterated", 8, 4.0)] {
        let params = AttackParams {
            epsilon: 16.0,
            iterations,
            step_size,
            target_label: None,
            pixel_bounds: (0.0, 255.0),
        };
        let mut fired = 0usize;
        let n = 40.min(holdout.len());
        for &i in holdout.iter().take(n) {
            let adv = if iterations == 1 {
                fgsm(&surrogate, &data.samples[i], &params).unwrap()
            } else {
                ifgsm(&surrogate, &data.samples[i], &params).unwrap()
            };
            let h = SERVICE.handle();
            if h.classify(&adv.perturbed).is_alert() {
                fired += 1;
            }
        }
        assert!(
            fired * 2 >= n,
            "{name} sign perturbations at strength 16 should alert at least half the time: {fired}/{n}"
        );
    }
}

#[test]
fn scheduled_update_swaps_model_and_stays_consistent() {
    let policy = OraclePolicy {
        update_after_queries: 25,
        ..OraclePolicy::default()
    };
    let service = OracleService::build(policy).unwrap();
    assert_eq!(service.model_version(), 1);
    let before = service.calibration_summary().clone();

    let (data, holdout) = &*DATA;
    let h = service.handle();
    for &i in holdout.iter().take(25) {
        assert!(h.classify(&data.samples[i].image).scores().is_some());
    }
    assert_eq!(service.model_version(), 2, "swap fires on the scheduled query");

    let report = service.force_update().unwrap();
    assert_eq!(report.version, 3);
    assert!(
        report.clean_consistency >= 0.90,
        "post-swap decisions must agree with the old model on clean data: {}",
        report.clean_consistency
    );
    assert!(
        (report.holdout_accuracy - before.holdout_accuracy).abs() <= 0.02,
        "accuracy drifted: {} -> {}",
        before.holdout_accuracy,
        report.holdout_accuracy
    );
}

#[test]
fn concurrent_sessions_conserve_accounting() {
    let policy = OraclePolicy {
        max_queries_per_session: 500,
        ..small_policy()
    };
    let service = OracleService::build(policy).unwrap();
    let session = service.open_session();
    std::thread::scope(|scope| {
        for _ in 0..8 {
            let service = &service;
            scope.spawn(move || {
                let zeros = vec![0.0; 784];
                for _ in 0..100 {
                    let r = service.classify_pixels(session, &zeros);
                    assert!(r.scores().is_some() || r.error_code() == Some(-15));
                }
            });
        }
    });
    let stats = service.session_stats(session).unwrap();
    assert_eq!(stats.attempted, 800);
    assert_eq!(stats.served, 500);
    assert_eq!(stats.errored, 300);
    assert!(stats.conserves());
    assert_eq!(stats.error_counts.get(&-15), Some(&300));
}

#[test]
fn flagging_respects_threshold_ordering() {
    let (data, holdout) = &*DATA;
    let mut rng = ChaCha8Rng::seed_from_u64(0xBEEF);
    let h = SERVICE.handle();
    let mut responses = Vec::new();
    for &i in holdout.iter().take(20) {
        responses.push(h.classify(&data.samples[i].image));
    }
    for _ in 0..20 {
        responses.push(h.classify(&noise_image(&mut rng)));
    }
    for r in &responses {
        let at = |t: f64| r.flagged(t).into_iter().collect::<BTreeSet<_>>();
        let (lo, mid, hi) = (at(30.0), at(50.0), at(70.0));
        assert!(hi.is_subset(&mid) && mid.is_subset(&lo));
    }
}

#[test]
fn unknown_and_closed_sessions_are_rejected() {
    let zeros = vec![0.0; 784];
    let r = SERVICE.classify_pixels(9_999_999, &zeros);
    assert_eq!(r.error_code(), Some(-15));
    assert_eq!(r.request_id, 0);

    let session = SERVICE.open_session();
    assert!(SERVICE.classify_pixels(session, &zeros).scores().is_some());
    let stats = SERVICE.close_session(session).expect("close returns final stats");
    assert_eq!(stats.served, 1);
    // Retired: stats stay readable, further queries fail like unknown ids.
    assert_eq!(SERVICE.session_stats(session), Some(stats.clone()));
    assert_eq!(SERVICE.close_session(session), Some(stats));
    assert_eq!(SERVICE.classify_pixels(session, &zeros).error_code(), Some(-15));
}

#[test]
fn http_round_trip_matches_in_process() {
    let server = spawn(SERVICE.clone()).expect("server binds");
    let client = HttpOracle::connect(&server.base_url()).expect("client connects");

    let (data, holdout) = &*DATA;
    let image = &data.samples[holdout[0]].image;
    let over_http = client.classify(image);
    let in_process = SERVICE.handle().classify(image);
    assert_eq!(over_http.scores(), in_process.scores(), "transport must not change scores");

    let stats = client.stats().unwrap();
    assert_eq!(stats.session_id, client.session_id());
    assert_eq!(stats.attempted, 1);
    assert_eq!(stats.served, 1);
    assert!(stats.conserves());
    server.stop();
}

#[test]
fn http_wire_errors_and_stats() {
    let server = spawn(SERVICE.clone()).expect("server binds");
    let base = server.base_url();
    let http = reqwest::blocking::Client::new();
    let post = |body: String| -> serde_json::Value {
        let resp = http
            .post(format!("{base}/classify"))
            .header("content-type", "application/json")
            .body(body)
            .send()
            .unwrap();
        assert_eq!(resp.status(), 200, "errors are reported in-band");
        serde_json::from_str(&resp.text().unwrap()).unwrap()
    };

    let session: serde_json::Value = serde_json::from_str(
        &http.post(format!("{base}/session")).send().unwrap().text().unwrap(),
    )
    .unwrap();
    let sid = session["session"].as_u64().unwrap();
    let good_image =
        atf_oracle::wire::encode_image(&Tensor::new(vec![0.0; 784], vec![1, 28, 28]).unwrap());

    let cases = [
        ("{not json".to_string(), -26),
        (
            serde_json::json!({"command": "transmogrify", "session": sid}).to_string(),
            -7,
        ),
        (
            serde_json::json!({
                "command": "classify", "session": sid,
                "url": "http://example.com/x.png"
            })
            .to_string(),
            -17,
        ),
        (
            serde_json::json!({"command": "classify", "session": sid}).to_string(),
            -9,
        ),
        (
            serde_json::json!({
                "command": "classify", "session": sid,
                "image": "!!!not-base64!!!", "shape": [1, 28, 28]
            })
            .to_string(),
            -9,
        ),
        (
            serde_json::json!({
                "command": "classify", "session": sid,
                "image": "AAAAAAA=", "shape": [1, 28, 28]
            })
            .to_string(),
            -9,
        ),
        (
            serde_json::json!({
                "command": "classify", "session": sid,
                "image": good_image, "shape": [3]
            })
            .to_string(),
            -9,
        ),
        (
            serde_json::json!({
                "command": "classify", "session": 424242,
                "image": good_image, "shape": [1, 28, 28]
            })
            .to_string(),
            -15,
        ),
    ];
    for (body, code) in cases {
        let v = post(body.clone());
        assert_eq!(v["error"].as_i64(), Some(code as i64), "body: {body}");
        assert!(v.get("categories").is_none());
    }

    // A well-formed request on the same session still works afterwards.
    let v = post(
        serde_json::json!({
            "command": "classify", "session": sid,
            "image": good_image, "shape": [1, 28, 28]
        })
        .to_string(),
    );
    assert!(v.get("error").is_none());
    assert_eq!(v["categories"].as_object().unwrap().len(), 5);

    let stats = http
        .get(format!("{base}/session/{sid}/stats"))
        .send()
        .unwrap();
    assert_eq!(stats.status(), 200);
    let stats: serde_json::Value = serde_json::from_str(&stats.text().unwrap()).unwrap();
    // Wire-level rejections never reach the session; only the unknown-session
    // case and this session's own traffic did.
    assert_eq!(stats["served"].as_u64(), Some(1));
    assert!(stats["attempted"].as_u64() >= Some(1));

    let missing = http
        .get(format!("{base}/session/987654/stats"))
        .send()
        .unwrap();
    assert_eq!(missing.status(), 404);

    let health: serde_json::Value = serde_json::from_str(
        &http.get(format!("{base}/healthz")).send().unwrap().text().unwrap(),
    )
    .unwrap();
    assert_eq!(health["ok"].as_bool(), Some(true));
    server.stop();
}

#[test]
fn http_admin_update_bumps_version() {
    let service = OracleService::build(small_policy()).unwrap();
    let server = spawn(service.clone()).expect("server binds");
    let base = server.base_url();
    let http = reqwest::blocking::Client::new();

    let report: serde_json::Value = serde_json::from_str(
        &http.post(format!("{base}/admin/update")).send().unwrap().text().unwrap(),
    )
    .unwrap();
    assert_eq!(report["version"].as_u64(), Some(2));
    let consistency = report["clean_consistency"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&consistency));

    let health: serde_json::Value = serde_json::from_str(
        &http.get(format!("{base}/healthz")).send().unwrap().text().unwrap(),
    )
    .unwrap();
    assert_eq!(health["model_version"].as_u64(), Some(2));
    server.stop();
}
