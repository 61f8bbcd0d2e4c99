use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use mlaqp_cli::repl::{format_estimate, Repl};
use mlaqp_cli::server::{answer, router, AppState, PredictRequest, PredictResponse};
use mlaqp_core::catalogue::ModelCatalogue;
use mlaqp_core::drift::MonitorConfig;
use mlaqp_core::engine::{self, Engine, TrainOptions};
use mlaqp_core::eval::{synthetic_workload, SyntheticSetup};
use mlaqp_core::gbdt::GbdtConfig;
use serde_json::{json, Value};
use tower::ServiceExt;

fn trained(seed: u64) -> ModelCatalogue {
    let (schema, records) = synthetic_workload(&SyntheticSetup {
        dims: 3,
        predicates: 2,
        rows: 5000,
        queries: 200,
        seed,
        ..Default::default()
    })
    .unwrap();
    let numbered: Vec<_> = records.into_iter().enumerate().map(|(i, r)| (i + 1, Ok(r))).collect();
    let prep = engine::prepare_log(&numbered, &schema, 1000).unwrap();
    let mut point = GbdtConfig::point_default();
    point.rounds = 60;
    let mut q = GbdtConfig::quantile_default();
    q.rounds = 60;
    q.learning_rate = 0.05;
    let opts = TrainOptions {
        point,
        quantile: Some(q),
        ..TrainOptions::default()
    };
    engine::train_catalogue(&prep, &opts).unwrap()
}

fn catalogue() -> &'static ModelCatalogue {
    static CAT: OnceLock<ModelCatalogue> = OnceLock::new();
    CAT.get_or_init(|| trained(0))
}

fn ready() -> Arc<AppState> {
    AppState::with_engine("unused", Engine::new(catalogue().clone()))
}

async fn call(state: Arc<AppState>, method: &str, path: &str, body: Option<&str>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(path)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = router(state).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

const SQL: &str = "SELECT COUNT(*), AVG(a1) FROM synth WHERE a1 BETWEEN 20000000 AND 30000000 AND a2 >= 50000000";

#[tokio::test]
async fn sql_request_returns_estimate_and_interval() {
    let (status, body) = call(ready(), "POST", "/predict", Some(&json!({ "sql": SQL }).to_string())).await;
    assert_eq!(status, StatusCode::OK);
    let resp: PredictResponse = serde_json::from_value(body).unwrap();
    assert_eq!(resp.af, "COUNT(*)");
    assert_eq!(resp.estimates.len(), 2);
    assert_eq!(resp.estimate, resp.estimates[0].estimate);
    let iv = resp.interval.unwrap();
    assert!(iv.low <= iv.high);
    assert_eq!(iv.nominal_coverage, 0.9);
    assert!(resp.groups.is_none());
}

#[tokio::test]
async fn extracted_request_matches_sql() {
    let engine = Engine::new(catalogue().clone());
    let meta = engine.vectorize(&engine.parse(SQL).unwrap()).unwrap();
    let slots: serde_json::Map<String, Value> = meta
        .slots()
        .enumerate()
        .filter_map(|(i, v)| v.map(|x| (i.to_string(), json!(x))))
        .collect();
    let body = json!({ "extracted": { "af": "AVG(a1)", "meta": slots } }).to_string();
    let (status, got) = call(ready(), "POST", "/predict", Some(&body)).await;
    assert_eq!(status, StatusCode::OK);
    let (_, via_sql) = call(ready(), "POST", "/predict", Some(&json!({ "sql": SQL }).to_string())).await;
    assert_eq!(got["estimate"], via_sql["estimates"][1]["estimate"]);
}

#[tokio::test]
async fn unknown_aggregate_is_400_naming_known_entries() {
    let body = json!({ "sql": "SELECT MIN(a2) FROM synth WHERE a1 >= 1" }).to_string();
    let (status, v) = call(ready(), "POST", "/predict", Some(&body)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let known: Vec<String> = serde_json::from_value(v["known"].clone()).unwrap();
    assert_eq!(known, ["AVG(a1)", "COUNT(*)", "MAX(a1)", "SUM(a1)"]);
}

#[tokio::test]
async fn malformed_requests_are_400() {
    for body in [
        "not json",
        "{}",
        r#"{"sql": "SELECT COUNT(*) FROM synth", "extracted": {"af": "COUNT(*)", "meta": {}}}"#,
        r#"{"sql": "SELECT COUNT(* FROM synth"}"#,
        r#"{"query": "x"}"#,
    ] {
        let (status, v) = call(ready(), "POST", "/predict", Some(body)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
        assert!(v["error"].is_string());
    }
}

#[tokio::test]
async fn width_mismatch_is_422() {
    let body = json!({ "extracted": { "af": "COUNT(*)", "meta": { "6": 1.0 } } }).to_string();
    let (status, _) = call(ready(), "POST", "/predict", Some(&body)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn unavailable_until_loaded() {
    let dir = tempfile::tempdir().unwrap();
    let state = AppState::new(dir.path().join("cat"));
    let (status, _) = call(Arc::clone(&state), "GET", "/health", None).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    let (status, _) = call(Arc::clone(&state), "POST", "/predict", Some(r#"{"sql": "x"}"#)).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert!(state.load().is_err());
    catalogue().save(&dir.path().join("cat")).unwrap();
    state.load().unwrap();
    let (status, v) = call(Arc::clone(&state), "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["entries"], 4);
}

#[tokio::test]
async fn catalogue_index_lists_entries() {
    let (status, v) = call(ready(), "GET", "/catalogue", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["feature_width"], 6);
    assert_eq!(v["entries"].as_array().unwrap().len(), 4);
    assert_eq!(v["entries"][1]["af"], "COUNT(*)");
    assert_eq!(v["entries"][1]["interval"], true);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_identical_requests_agree() {
    let state = ready();
    let body = json!({ "sql": SQL }).to_string();
    let tasks: Vec<_> = (0..64)
        .map(|_| {
            let s = Arc::clone(&state);
            let b = body.clone();
            tokio::spawn(async move { call(s, "POST", "/predict", Some(&b)).await })
        })
        .collect();
    let mut seen = Vec::new();
    for t in tasks {
        let (status, v) = t.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        seen.push(v["estimates"].clone());
    }
    assert!(seen.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn repl_and_http_agree() {
    let engine = Engine::new(catalogue().clone());
    let resp = answer(
        &engine,
        &PredictRequest {
            sql: Some(SQL.into()),
            extracted: None,
        },
    )
    .unwrap();
    let mut repl = Repl::new(engine, MonitorConfig::default());
    let mut out = Vec::new();
    repl.line(SQL, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    for (i, e) in resp.estimates.iter().enumerate() {
        assert_eq!(lines[i], format_estimate(e));
    }
}

#[test]
fn hot_reload_swaps_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cat");
    catalogue().save(&path).unwrap();
    let state = AppState::new(&path);
    state.load().unwrap();
    assert!(state.reload_if_changed().is_none());
    let before = state.engine().unwrap().predict_sql(SQL).unwrap();

    let other = trained(9);
    other.save(&path).unwrap();
    state.reload_if_changed().unwrap().unwrap();
    let after = state.engine().unwrap().predict_sql(SQL).unwrap();
    assert_ne!(before, after);
    assert_eq!(after, Engine::new(other).predict_sql(SQL).unwrap());
}

#[test]
fn failed_reload_keeps_previous_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cat");
    catalogue().save(&path).unwrap();
    let state = AppState::new(&path);
    state.load().unwrap();
    std::fs::write(path.join("manifest.json"), b"{ broken").unwrap();
    assert!(state.load().is_err());
    assert!(state.engine().is_some());
}
