mod common;

use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use proptest::prelude::*;
use serde_json::{json, Value};
use tower::ServiceExt;

use clam::service::{router, AppState, ServiceConfig};
use clam::{LanguageModel, ScriptedBackend};

fn moon_backend() -> Arc<dyn LanguageModel> {
    Arc::new(ScriptedBackend::from_json_file(common::crate_path("data/fixtures/moon_backend.json")).unwrap())
}

/// Delays every completion so that two posts overlap while the first
/// episode is still classifying.
struct Slow(Arc<dyn LanguageModel>);

impl LanguageModel for Slow {
    fn complete(&self, request: &clam::CompletionRequest) -> Result<clam::Completion, clam::lm::LmError> {
        std::thread::sleep(Duration::from_millis(30));
        self.0.complete(request)
    }

    fn name(&self) -> String {
        self.0.name()
    }
}

fn app_with(backend: Option<Arc<dyn LanguageModel>>, config: ServiceConfig) -> Router {
    router(AppState::new(backend, config))
}

/// Short clarification timeout: a runtime waits for its blocking episodes on
/// shutdown, and some tests end with a session still awaiting a reply.
fn test_config() -> ServiceConfig {
    ServiceConfig {
        clarification_timeout: Duration::from_secs(2),
        ..ServiceConfig::default()
    }
}

fn app() -> Router {
    app_with(Some(moon_backend()), test_config())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or(Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

async fn create(app: &Router, body: Option<Value>) -> String {
    let (status, v) = call(app, "POST", "/sessions", body).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

async fn post(app: &Router, id: &str, text: &str) -> (StatusCode, Value) {
    call(
        app,
        "POST",
        &format!("/sessions/{id}/messages"),
        Some(json!({ "text": text })),
    )
    .await
}

/// Polls until the session leaves the in-flight states.
async fn settle(app: &Router, id: &str) -> Value {
    let deadline = Instant::now() + Duration::from_secs(10);
    loop {
        let (status, v) = call(app, "GET", &format!("/sessions/{id}"), None).await;
        assert_eq!(status, StatusCode::OK);
        let state = v["state"].as_str().unwrap();
        if !matches!(state, "classifying" | "answering") {
            return v;
        }
        assert!(Instant::now() < deadline, "session stuck in {state}");
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
}

fn kinds(view: &Value) -> Vec<String> {
    view["turns"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t["kind"].as_str().unwrap().to_string())
        .collect()
}

#[tokio::test(flavor = "multi_thread")]
async fn ambiguous_question_waits_for_the_human() {
    let app = app();
    let id = create(&app, None).await;
    let (_, fresh) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(fresh["state"], "awaiting_question");
    assert_eq!(fresh["turns"], json!([]));

    let (status, _) = post(&app, &id, "When did he land on the moon?").await;
    assert_eq!(status, StatusCode::OK);
    let view = settle(&app, &id).await;
    assert_eq!(view["state"], "awaiting_clarification");
    assert_eq!(kinds(&view), ["initial_question", "clarifying_question"]);
    assert_eq!(view["turns"][1]["text"], "Who is he?");
    assert_eq!(view["decision"], "ambiguous");
    assert_eq!(view["score"]["logprob_true"], -0.05);

    let (status, _) = post(&app, &id, "Alan Bean").await;
    assert_eq!(status, StatusCode::OK);
    let view = settle(&app, &id).await;
    assert_eq!(view["state"], "done");
    assert_eq!(
        kinds(&view),
        [
            "initial_question",
            "clarifying_question",
            "clarification",
            "final_answer"
        ]
    );
    assert!(view["final_answer"].as_str().unwrap().contains("November 19, 1969"));

    let (status, _) = post(&app, &id, "again").await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test(flavor = "multi_thread")]
async fn unambiguous_question_is_answered_directly() {
    let app = app();
    let id = create(&app, Some(json!({ "policy": "clam" }))).await;
    post(&app, &id, "On what date did Neil Armstrong land on the moon?").await;
    let view = settle(&app, &id).await;
    assert_eq!(view["state"], "done");
    assert_eq!(kinds(&view), ["initial_question", "direct_answer"]);
    assert_eq!(view["decision"], "unambiguous");
    assert!(view["final_answer"].as_str().unwrap().contains("July 20"));
}

#[tokio::test(flavor = "multi_thread")]
async fn error_statuses() {
    let none = app_with(None, ServiceConfig::default());
    assert_eq!(
        call(&none, "POST", "/sessions", None).await.0,
        StatusCode::SERVICE_UNAVAILABLE
    );

    let app = app();
    let (status, _) = call(&app, "POST", "/sessions", Some(json!({ "policy": "oracle_magic" }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(call(&app, "GET", "/sessions/nope", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(post(&app, "nope", "hi").await.0, StatusCode::NOT_FOUND);

    let id = create(&app, None).await;
    assert_eq!(post(&app, &id, "   ").await.0, StatusCode::BAD_REQUEST);
    let (status, _) = call(
        &app,
        "POST",
        &format!("/sessions/{id}/messages"),
        Some(json!({ "txt": "x" })),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let a = create(&app, None).await;
    let b = create(&app, None).await;
    assert_ne!(a, b);
}

#[tokio::test(flavor = "multi_thread")]
async fn health_and_config() {
    let app = app();
    let (status, v) = call(&app, "GET", "/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    let (_, v) = call(&app, "GET", "/config", None).await;
    assert_eq!(v["tau"], -0.3);
    assert_eq!(v["lambda"], 0.8);
    assert!(v["backend"].as_str().unwrap().starts_with("scripted"));
    assert_eq!(v["prompt_version"].as_str().unwrap(), clam::prompts::prompt_version());
}

#[tokio::test(flavor = "multi_thread")]
async fn concurrent_posts_one_wins() {
    let app = app_with(Some(Arc::new(Slow(moon_backend()))), test_config());
    for _ in 0..10 {
        let id = create(&app, None).await;
        let (a, b) = (app.clone(), app.clone());
        let (ia, ib) = (id.clone(), id.clone());
        let first = tokio::spawn(async move { post(&a, &ia, "When did he land on the moon?").await.0 });
        let second = tokio::spawn(async move { post(&b, &ib, "When did he land on the moon?").await.0 });
        let mut codes = [first.await.unwrap(), second.await.unwrap()];
        codes.sort();
        assert_eq!(codes, [StatusCode::OK, StatusCode::CONFLICT]);
        let view = settle(&app, &id).await;
        assert_eq!(kinds(&view), ["initial_question", "clarifying_question"]);
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn finished_dialogues_are_snapshotted() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("live.jsonl");
    let config = ServiceConfig {
        snapshot_path: Some(path.clone()),
        ..test_config()
    };
    let app = app_with(Some(moon_backend()), config);
    let id = create(&app, None).await;
    post(&app, &id, "When did he land on the moon?").await;
    settle(&app, &id).await;
    post(&app, &id, "Alan Bean").await;
    settle(&app, &id).await;
    let text = std::fs::read_to_string(&path).unwrap();
    let t: clam::DialogueTranscript = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert!(t.asked_clarification);
    t.validate().unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn clarification_timeout_aborts() {
    let config = ServiceConfig {
        clarification_timeout: Duration::from_millis(50),
        ..ServiceConfig::default()
    };
    let app = app_with(Some(moon_backend()), config);
    let id = create(&app, None).await;
    post(&app, &id, "When did he land on the moon?").await;
    let deadline = Instant::now() + Duration::from_secs(5);
    loop {
        let (_, v) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
        if v["state"] == "aborted" {
            assert!(v["error"].as_str().is_some());
            break;
        }
        assert!(Instant::now() < deadline, "never aborted: {v}");
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    assert_eq!(post(&app, &id, "Alan Bean").await.0, StatusCode::CONFLICT);
}

#[derive(Debug, Clone)]
enum Op {
    Ask(bool),
    Reply,
    Empty,
    Get,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        any::<bool>().prop_map(Op::Ask),
        Just(Op::Reply),
        Just(Op::Empty),
        Just(Op::Get)
    ]
}

const ORDER: [&str; 5] = [
    "awaiting_question",
    "classifying",
    "awaiting_clarification",
    "answering",
    "done",
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    // Every request sequence leaves the session in a reachable state, with
    // turns matching the state and never moving backwards.
    #[test]
    fn random_request_sequences(ops in prop::collection::vec(op(), 1..8)) {
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
        rt.block_on(async {
            let app = app();
            let id = create(&app, None).await;
            let mut rank = 0;
            for op in ops {
                let before = settle(&app, &id).await;
                let state = before["state"].as_str().unwrap().to_string();
                let (status, _) = match op {
                    Op::Ask(amb) => {
                        let q = if amb {
                            "When did he land on the moon?"
                        } else {
                            "On what date did Neil Armstrong land on the moon?"
                        };
                        post(&app, &id, q).await
                    }
                    Op::Reply => post(&app, &id, "Alan Bean").await,
                    Op::Empty => post(&app, &id, "").await,
                    Op::Get => call(&app, "GET", &format!("/sessions/{id}"), None).await,
                };
                let accepts = matches!(state.as_str(), "awaiting_question" | "awaiting_clarification");
                match op {
                    Op::Get => assert_eq!(status, StatusCode::OK),
                    Op::Empty => assert_eq!(status, StatusCode::BAD_REQUEST),
                    _ if accepts => assert_eq!(status, StatusCode::OK),
                    _ => assert_eq!(status, StatusCode::CONFLICT),
                }
                let after = settle(&app, &id).await;
                let s = after["state"].as_str().unwrap();
                // A failed episode (e.g. an unscripted question) aborts; its
                // turns are a prefix of a legal transcript.
                let r = if s == "aborted" { ORDER.len() } else { ORDER.iter().position(|o| *o == s).unwrap() };
                assert!(r >= rank, "state went back to {s}");
                rank = r;
                let k = kinds(&after);
                let legal: [&[&str]; 2] = [
                    &["initial_question", "direct_answer"],
                    &["initial_question", "clarifying_question", "clarification", "final_answer"],
                ];
                let expected: Vec<&[&str]> = match s {
                    "awaiting_question" => vec![&[]],
                    "awaiting_clarification" => vec![&legal[1][..2]],
                    "aborted" => legal.iter().flat_map(|l| (1..=l.len()).map(move |n| &l[..n])).collect(),
                    _ => legal.to_vec(),
                };
                assert!(expected.iter().any(|e| *e == k.as_slice()), "{s}: {k:?}");
            }
        });
        rt.shutdown_background();
    }
}
