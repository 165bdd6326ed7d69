//! Drives the session API in-process: an ambiguous question, a clarifying
//! question back, the human's reply, and the final answer.
//!
//! cargo run --example serve_sessions
//!
//! To serve the same scripted backend over HTTP instead:
//! cargo run -- serve --backend scripted:data/fixtures/moon_backend.json

use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::Request;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use clam::service::{router, AppState, ServiceConfig};
use clam::ScriptedBackend;

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> Value {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    serde_json::from_slice(&bytes).unwrap()
}

async fn wait(app: &axum::Router, id: &str) -> Value {
    loop {
        let v = call(app, "GET", &format!("/sessions/{id}"), None).await;
        if !matches!(v["state"].as_str(), Some("classifying" | "answering")) {
            return v;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
}

#[tokio::main]
async fn main() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/fixtures/moon_backend.json");
    let backend = Arc::new(ScriptedBackend::from_json_file(path).expect("fixture"));
    let app = router(AppState::new(Some(backend), ServiceConfig::default()));

    let id = call(&app, "POST", "/sessions", None).await["session_id"]
        .as_str()
        .unwrap()
        .to_string();
    for text in ["When did he land on the moon?", "Alan Bean"] {
        println!("user: {text}");
        call(
            &app,
            "POST",
            &format!("/sessions/{id}/messages"),
            Some(json!({ "text": text })),
        )
        .await;
        let view = wait(&app, &id).await;
        let last = view["turns"].as_array().unwrap().last().unwrap();
        println!("bot:  {}   [{}; state {}]", last["text"], last["kind"], view["state"]);
    }
}
