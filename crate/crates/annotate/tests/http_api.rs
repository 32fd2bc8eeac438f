use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use qagen_annotate::{router, ServiceOptions};
use qagen_core::annotation::{AnnotationStore, Candidate, SystemOutputs};
use serde_json::{json, Value};
use tower::ServiceExt;

fn systems(names: &[&str], n: usize) -> Vec<SystemOutputs> {
    names
        .iter()
        .map(|s| SystemOutputs {
            system: s.to_string(),
            candidates: (0..n)
                .map(|i| Candidate {
                    question_id: format!("q{i}"),
                    question: format!("質問{i}"),
                    context_text: "東京タワーは電波塔です。".into(),
                    answer: format!("答え{i}"),
                })
                .collect(),
        })
        .collect()
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>, token: Option<&str>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    let req = match body {
        Some(v) => req.header("content-type", "application/json").body(Body::from(v.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

fn new_session_body(judges: &[&str], k: usize) -> Value {
    json!({
        "version": 1,
        "systems": systems(&["sys-a"], 20),
        "spec": {"session_id": "s1", "judges": judges, "sample_size": k, "sample_seed": 7}
    })
}

fn app(dir: &std::path::Path, token: Option<&str>) -> Router {
    let store = Arc::new(AnnotationStore::open(dir).unwrap());
    router(store, ServiceOptions { token: token.map(String::from), cors_origin: Some("http://localhost:5173".into()) })
}

#[tokio::test]
async fn full_judging_flow() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), None);
    let (st, created) = call(&app, "POST", "/sessions", Some(new_session_body(&["j1", "j2"], 6)), None).await;
    assert_eq!(st, StatusCode::CREATED);
    assert_eq!(created["session_id"], "s1");
    assert_eq!(created["total_items"], 6);

    let (st, next) = call(&app, "GET", "/sessions/s1/next?judge=j1", None, None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(next["status"], "item");
    assert_eq!(next["index"], 0);
    assert_eq!(next["version"], 1);
    assert!(next.get("system").is_none());
    assert!(!next.to_string().contains("sys-a"), "payload leaks system identity: {next}");

    let item = next["item_id"].as_str().unwrap().to_string();
    let body = json!({"version": 1, "item_id": item, "judge_id": "j1", "verdict": "correct"});
    let (st, ack) = call(&app, "POST", "/sessions/s1/judgments", Some(body.clone()), None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(ack["status"], "recorded");
    assert_eq!(ack["progress"]["judged"], 1);
    assert_eq!(ack["progress"]["total"], 3);

    let (_, ack) = call(&app, "POST", "/sessions/s1/judgments", Some(body), None).await;
    assert_eq!(ack["status"], "duplicate");

    let (_, next) = call(&app, "GET", "/sessions/s1/next?judge=j1", None, None).await;
    assert_eq!(next["index"], 2);

    let (st, stats) = call(&app, "GET", "/sessions/s1/stats", None, None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(stats["resolved"], 1);
    assert_eq!(stats["unresolved"], 5);
    assert_eq!(stats["accuracy"]["tenths"], 1000);
    assert_eq!(stats["by_system"], json!({}));
}

#[tokio::test]
async fn errors_map_to_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), None);
    call(&app, "POST", "/sessions", Some(new_session_body(&["j1", "j2"], 4)), None).await;

    let (st, err) = call(&app, "POST", "/sessions", Some(new_session_body(&["j1"], 4)), None).await;
    assert_eq!(st, StatusCode::CONFLICT);
    assert_eq!(err["error"], "session_exists");

    let (st, err) = call(&app, "POST", "/sessions", Some(json!({"systems": systems(&["a"], 3), "spec": {"judges": ["j"], "sample_size": 9, "sample_seed": 1}})), None).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert_eq!(err["error"], "sample_size");

    let (st, _) = call(&app, "GET", "/sessions/nope/stats", None, None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, err) = call(&app, "GET", "/sessions/s1/next?judge=ghost", None, None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    assert_eq!(err["error"], "unknown_judge");
    let (st, _) = call(&app, "GET", "/sessions/s1/next", None, None).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);

    let bad_verdict = json!({"item_id": "item-0000", "judge_id": "j1", "verdict": "maybe"});
    let (st, err) = call(&app, "POST", "/sessions/s1/judgments", Some(bad_verdict), None).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert_eq!(err["error"], "malformed");

    let unknown = json!({"item_id": "item-9999", "judge_id": "j1", "verdict": "correct"});
    let (st, err) = call(&app, "POST", "/sessions/s1/judgments", Some(unknown), None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    assert_eq!(err["error"], "unknown_item");

    let wrong_judge = json!({"item_id": "item-0001", "judge_id": "j1", "verdict": "correct"});
    let (st, err) = call(&app, "POST", "/sessions/s1/judgments", Some(wrong_judge), None).await;
    assert_eq!(st, StatusCode::CONFLICT);
    assert_eq!(err["error"], "not_assigned");

    let future = json!({"version": 2, "item_id": "item-0000", "judge_id": "j1", "verdict": "correct"});
    let (st, err) = call(&app, "POST", "/sessions/s1/judgments", Some(future), None).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert_eq!(err["error"], "unsupported_version");
}

#[tokio::test]
async fn token_is_enforced() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), Some("secret"));
    let (st, _) = call(&app, "POST", "/sessions", Some(new_session_body(&["j1"], 2)), None).await;
    assert_eq!(st, StatusCode::UNAUTHORIZED);
    let (st, _) = call(&app, "POST", "/sessions", Some(new_session_body(&["j1"], 2)), Some("wrong")).await;
    assert_eq!(st, StatusCode::UNAUTHORIZED);
    let (st, _) = call(&app, "POST", "/sessions", Some(new_session_body(&["j1"], 2)), Some("secret")).await;
    assert_eq!(st, StatusCode::CREATED);

    let req = Request::builder().uri("/sessions/s1/stats").header("x-judge-token", "secret").body(Body::empty()).unwrap();
    assert_eq!(app.clone().oneshot(req).await.unwrap().status(), StatusCode::OK);
    let (st, _) = call(&app, "GET", "/health", None, None).await;
    assert_eq!(st, StatusCode::OK);
}

#[tokio::test]
async fn cors_preflight_allows_ui_origin() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), None);
    let req = Request::builder()
        .method("OPTIONS")
        .uri("/sessions/s1/judgments")
        .header("origin", "http://localhost:5173")
        .header("access-control-request-method", "POST")
        .header("access-control-request-headers", "content-type,x-judge-token")
        .body(Body::empty())
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert_eq!(resp.headers()["access-control-allow-origin"], "http://localhost:5173");
}

#[tokio::test]
async fn judgments_survive_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let before = {
        let app = app(dir.path(), None);
        call(&app, "POST", "/sessions", Some(new_session_body(&["j1"], 5)), None).await;
        for i in 0..3 {
            let verdict = if i == 1 { "incorrect" } else { "correct" };
            let body = json!({"item_id": format!("item-{i:04}"), "judge_id": "j1", "verdict": verdict});
            call(&app, "POST", "/sessions/s1/judgments", Some(body), None).await;
        }
        call(&app, "GET", "/sessions/s1/stats", None, None).await.1
    };
    let app = app(dir.path(), None);
    let (_, after) = call(&app, "GET", "/sessions/s1/stats", None, None).await;
    assert_eq!(before, after);
    assert_eq!(after["resolved"], 3);
    assert_eq!(after["accuracy"]["tenths"], 667);
}
