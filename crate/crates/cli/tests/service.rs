use std::time::Duration;

use apdl_bench::service::{router, AppState, ModuleRegistry};
use apdl_harness::bench::BenchEnv;
use apdl_harness::corpus::generate_default_corpus;
use apdl_harness::orchestrator::trace::{lint_trace, TraceEvent};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn app() -> Router {
    router(AppState::new(
        ModuleRegistry::with_mapdl(generate_default_corpus(42)),
        BenchEnv::default(),
        2,
    ))
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn json_of(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let (s, b) = send(app, req).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

fn post(key: &str, body: &str) -> Request<Body> {
    Request::post(format!("/v1/modules/{key}/runs"))
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

fn get(path: &str) -> Request<Body> {
    Request::get(path).body(Body::empty()).unwrap()
}

async fn wait(app: &Router, id: &str) -> Value {
    for _ in 0..500 {
        let (_, v) = json_of(app, get(&format!("/v1/runs/{id}"))).await;
        if v["status"] == "finished" || v["status"] == "failed" {
            return v;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("run {id} never finished");
}

#[tokio::test]
async fn summary_is_empty_without_runs() {
    let (s, v) = json_of(&app(), get("/v1/reports/summary")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v, json!({}));
}

#[tokio::test]
async fn unknown_module_and_run_are_404() {
    let app = app();
    let (s, v) = json_of(&app, post("cfd", r#"{"case_id":1,"strategy":"model_only"}"#)).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["code"], "MODULE_NOT_FOUND");
    let (s, v) = json_of(&app, get("/v1/runs/deadbeef")).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["code"], "RUN_NOT_FOUND");
}

#[tokio::test]
async fn malformed_bodies_are_400() {
    let app = app();
    for body in [
        "not json",
        r#"{"case_id":"one","strategy":"model_only"}"#,
        r#"{"case_id":1,"strategy":"magic"}"#,
        r#"{"case_id":999,"strategy":"model_only"}"#,
        r#"{"strategies":[],"repeats":1}"#,
    ] {
        let (s, v) = json_of(&app, post("mapdl", body)).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{body}");
        assert_eq!(v["code"], "BAD_REQUEST");
    }
}

#[tokio::test]
async fn duplicate_submission_is_409() {
    let app = app();
    let body = r#"{"case_id":3,"strategy":"rule_only","repeat":1}"#;
    let (s, _) = json_of(&app, post("mapdl", body)).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let (s, v) = json_of(&app, post("mapdl", body)).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["code"], "DUPLICATE_RUN");
}

#[tokio::test]
async fn finished_run_exposes_scores_and_trace() {
    let app = app();
    let (s, v) = json_of(&app, post("mapdl", r#"{"case_id":8,"strategy":"model_only"}"#)).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let id = v["run_id"].as_str().unwrap().to_string();
    let entry = wait(&app, &id).await;
    assert_eq!(entry["status"], "finished");
    assert_eq!(entry["scores"]["case_id"], 8);
    assert_eq!(entry["record"]["trace_ref"], format!("traces/{id}.jsonl"));

    let (s, body) = send(&app, get(&format!("/v1/runs/{id}/trace"))).await;
    assert_eq!(s, StatusCode::OK);
    let events: Vec<TraceEvent> = String::from_utf8(body)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(lint_trace(&events).is_empty());
    assert!(events.iter().all(|e| e.run_id == id));

    let (_, summary) = json_of(&app, get("/v1/reports/summary")).await;
    assert_eq!(summary["summaries"][0]["n"], 1);
}

#[tokio::test]
async fn plan_submission_enqueues_every_run() {
    let app = app();
    let (s, v) = json_of(
        &app,
        post("mapdl", r#"{"strategies":["no_recovery","model_only"],"repeats":2,"case_ids":[1,2]}"#),
    )
    .await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let ids: Vec<String> = serde_json::from_value(v["run_ids"].clone()).unwrap();
    assert_eq!(ids.len(), 8);
    for id in &ids {
        assert_eq!(wait(&app, id).await["status"], "finished");
    }
    let (_, summary) = json_of(&app, get("/v1/reports/summary")).await;
    let total: u64 = summary["summaries"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["n"].as_u64().unwrap())
        .sum();
    assert_eq!(total, 8);
}
