use std::path::Path;
use std::sync::{Arc, RwLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use stackvet::datagen::{Combo, Dataset, Sample, SampleKind, CUTOUT};
use stackvet::triage::{triage_stats, TriagePolicy};
use stackvet::Tensor;
use stackvet_review::{router, ReviewState};
use tower::ServiceExt;

const SCORES: [f64; 10] = [0.95, 0.81, 0.8, 0.62, 0.5, 0.45, 0.3, 0.21, 0.19, 0.01];

fn dataset() -> Dataset {
    let combo = Combo::new(&[32, 4]).unwrap();
    let samples = (0..SCORES.len())
        .map(|i| Sample {
            id: format!("c{i}"),
            source: i as u64,
            label: u8::from(i % 2 == 0),
            kind: if i % 2 == 0 { SampleKind::Object } else { SampleKind::Noise },
            combo: combo.clone(),
            channels: Tensor::from_fn(&[9, CUTOUT, CUTOUT], |k| (k % 400) as f32 * 0.01 + (k / 400) as f32),
        })
        .collect();
    Dataset {
        combo,
        samples,
        standardization: None,
    }
}

fn policy() -> TriagePolicy {
    TriagePolicy::new(0.8, 0.2).unwrap()
}

fn app_with(log: &Path, policy: TriagePolicy) -> Router {
    let state = ReviewState::new(dataset(), SCORES.to_vec(), policy, log).unwrap();
    router(Arc::new(RwLock::new(state)))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    call(app, "GET", uri, None).await
}

async fn post_verdict(app: &Router, body: Value) -> (StatusCode, Value) {
    call(app, "POST", "/api/verdict", Some(body.to_string())).await
}

fn lines(log: &Path) -> Vec<String> {
    std::fs::read_to_string(log)
        .unwrap_or_default()
        .lines()
        .map(String::from)
        .collect()
}

fn conserved(stats: &Value) -> bool {
    let n = |k: &str| stats[k].as_u64().unwrap();
    n("auto_positive") + n("auto_negative") + n("pending") + n("reviewed") == n("total")
}

#[tokio::test]
async fn health_reports_version() {
    let dir = tempfile::tempdir().unwrap();
    let app = app_with(&dir.path().join("v.ndjson"), policy());
    let (status, body) = get(&app, "/api/health").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["version"], env!("CARGO_PKG_VERSION"));
}

#[tokio::test]
async fn queue_holds_exactly_the_human_bucket() {
    let dir = tempfile::tempdir().unwrap();
    let app = app_with(&dir.path().join("v.ndjson"), policy());
    let (status, q) = get(&app, "/api/queue?limit=100").await;
    assert_eq!(status, StatusCode::OK);
    let ids: Vec<&str> = q.as_array().unwrap().iter().map(|i| i["id"].as_str().unwrap()).collect();
    let labels: Vec<u8> = (0..SCORES.len()).map(|i| u8::from(i % 2 == 0)).collect();
    let st = triage_stats(&SCORES, &labels, &policy()).unwrap();
    assert_eq!(ids.len(), st.human_review);
    // most ambiguous first: distance from the 0.5 midpoint
    assert_eq!(ids, ["c4", "c5", "c3", "c6", "c7", "c2"]);
    let first = &q[0];
    assert_eq!(first["combo"], json!([32, 4]));
    let channels = first["channels"].as_array().unwrap();
    assert_eq!(channels.len(), 9);
    assert_eq!((channels[0]["depth"].as_u64(), channels[0]["group"].as_u64()), (Some(32), Some(0)));
    assert_eq!((channels[8]["depth"].as_u64(), channels[8]["group"].as_u64()), (Some(4), Some(7)));
    assert_eq!(channels[3]["pixels"].as_array().unwrap().len(), CUTOUT * CUTOUT);
    assert_eq!(channels[3]["min"].as_f64(), Some(3.0));
    assert!((channels[3]["max"].as_f64().unwrap() - 6.99).abs() < 1e-5);

    let (_, short) = get(&app, "/api/queue?limit=2").await;
    assert_eq!(short.as_array().unwrap().len(), 2);
    let (_, default) = get(&app, "/api/queue").await;
    assert_eq!(default.as_array().unwrap().len(), 6);
}

#[tokio::test]
async fn bad_limit_is_a_json_400() {
    let dir = tempfile::tempdir().unwrap();
    let app = app_with(&dir.path().join("v.ndjson"), policy());
    let (status, body) = get(&app, "/api/queue?limit=lots").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(body["error"].is_string());
}

#[tokio::test]
async fn equal_thresholds_give_empty_queue() {
    let dir = tempfile::tempdir().unwrap();
    let app = app_with(&dir.path().join("v.ndjson"), TriagePolicy::new(0.4, 0.4).unwrap());
    let (_, q) = get(&app, "/api/queue").await;
    assert_eq!(q, json!([]));
    let (_, stats) = get(&app, "/api/stats").await;
    assert_eq!(stats["remaining_ratio"], 0.0);
    assert!(conserved(&stats));
}

#[tokio::test]
async fn verdicts_are_logged_once_and_leave_the_queue() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("v.ndjson");
    let app = app_with(&log, policy());
    let (_, stats) = get(&app, "/api/stats").await;
    assert_eq!(stats["reviewed"], 0);
    assert_eq!(stats["pending"], 6);
    assert_eq!(stats["remaining_ratio"], 0.6);
    assert!(conserved(&stats));

    let v = json!({"id": "c4", "label": "object", "reviewer": "ana"});
    let (status, ack) = post_verdict(&app, v.clone()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ack["recorded"], true);
    assert_eq!(lines(&log).len(), 1);
    let rec: Value = serde_json::from_str(&lines(&log)[0]).unwrap();
    assert_eq!(rec["id"], "c4");
    assert!(rec["timestamp_ms"].as_u64().unwrap() > 0);

    // identical repeat: acknowledged, nothing appended
    let (status, ack) = post_verdict(&app, v).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ack["recorded"], false);
    assert_eq!(lines(&log).len(), 1);

    let (_, q) = get(&app, "/api/queue").await;
    assert!(q.as_array().unwrap().iter().all(|i| i["id"] != "c4"));
    let (_, stats) = get(&app, "/api/stats").await;
    assert_eq!((stats["reviewed"].as_u64(), stats["pending"].as_u64()), (Some(1), Some(5)));
    assert_eq!(stats["objects"], 1);
    assert!(conserved(&stats));

    // a different verdict supersedes
    let (_, ack) = post_verdict(&app, json!({"id": "c4", "label": "false_positive", "reviewer": "ana"})).await;
    assert_eq!(ack["recorded"], true);
    assert_eq!(lines(&log).len(), 2);
    let (_, stats) = get(&app, "/api/stats").await;
    assert_eq!((stats["objects"].as_u64(), stats["false_positives"].as_u64()), (Some(0), Some(1)));
    assert_eq!(stats["reviewed"], 1);
    let (_, sample) = get(&app, "/api/sample/c4").await;
    assert_eq!(sample["verdict"]["label"], "false_positive");
    assert_eq!(sample["bucket"], "human_review");
}

#[tokio::test]
async fn rejected_verdicts_leave_log_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("v.ndjson");
    let app = app_with(&log, policy());
    let (status, body) = post_verdict(&app, json!({"id": "nope", "label": "object", "reviewer": "ana"})).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(body["error"].is_string());
    // auto-decided samples are not open for review
    let (status, _) = post_verdict(&app, json!({"id": "c0", "label": "object", "reviewer": "ana"})).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    for bad in [
        "{not json".to_string(),
        json!({"id": "c4", "label": "maybe", "reviewer": "ana"}).to_string(),
        json!({"id": "c4", "label": "object"}).to_string(),
        json!({"id": "c4", "label": "object", "reviewer": "ana", "extra": 1}).to_string(),
        json!({"id": "c4", "label": "object", "reviewer": " "}).to_string(),
    ] {
        let (status, body) = call(&app, "POST", "/api/verdict", Some(bad.clone())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{bad}");
        assert!(body["error"].is_string());
    }
    assert!(lines(&log).is_empty());
}

#[tokio::test]
async fn unknown_sample_and_route_are_404() {
    let dir = tempfile::tempdir().unwrap();
    let app = app_with(&dir.path().join("v.ndjson"), policy());
    let (status, body) = get(&app, "/api/sample/missing").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(body["error"].is_string());
    let (status, _) = get(&app, "/api/elsewhere").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, sample) = get(&app, "/api/sample/c0").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(sample["bucket"], "auto_positive");
}

#[tokio::test]
async fn restart_replays_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("v.ndjson");
    {
        let app = app_with(&log, policy());
        post_verdict(&app, json!({"id": "c3", "label": "object", "reviewer": "ana"})).await;
        post_verdict(&app, json!({"id": "c6", "label": "object", "reviewer": "ana"})).await;
        post_verdict(&app, json!({"id": "c6", "label": "false_positive", "reviewer": "bo"})).await;
    }
    let app = app_with(&log, policy());
    let (_, stats) = get(&app, "/api/stats").await;
    assert_eq!((stats["reviewed"].as_u64(), stats["pending"].as_u64()), (Some(2), Some(4)));
    assert_eq!(stats["false_positives"], 1);
    assert!(lines(&log).iter().all(|l| serde_json::from_str::<Value>(l).is_ok()));
}

#[tokio::test]
async fn conservation_holds_through_a_full_review() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("v.ndjson");
    let app = app_with(&log, policy());
    let mut n = 0;
    loop {
        let (_, q) = get(&app, "/api/queue?limit=1").await;
        let Some(item) = q.as_array().unwrap().first() else { break };
        let (status, _) = post_verdict(&app, json!({"id": item["id"], "label": "object", "reviewer": "ana"})).await;
        assert_eq!(status, StatusCode::OK);
        n += 1;
        assert_eq!(lines(&log).len(), n);
        let (_, stats) = get(&app, "/api/stats").await;
        assert!(conserved(&stats), "{stats}");
    }
    assert_eq!(n, 6);
    let (_, stats) = get(&app, "/api/stats").await;
    assert_eq!((stats["pending"].as_u64(), stats["pending_ratio"].as_f64()), (Some(0), Some(0.0)));
}

#[test]
fn mismatched_scores_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let r = ReviewState::new(dataset(), vec![0.5; 3], policy(), &dir.path().join("v.ndjson"));
    assert!(r.is_err());
}

#[test]
fn corrupt_log_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("v.ndjson");
    std::fs::write(&log, "{\"id\":\"c4\"\n").unwrap();
    assert!(ReviewState::new(dataset(), SCORES.to_vec(), policy(), &log).is_err());
}
