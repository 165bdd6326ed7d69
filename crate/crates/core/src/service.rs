//! HTTP session API for live dialogues with a human as the clarification
//! source.
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/sessions` | create, optional body `{"policy": "..."}` |
//! | POST | `/sessions/{id}/messages` | `{"text": "..."}` |
//! | GET | `/sessions/{id}` | current [`SessionView`] |
//! | GET | `/healthz` | liveness |
//! | GET | `/config` | τ, λ, backend name, prompt hash |
//!
//! Posting a message returns at once with the session in `classifying` or
//! `answering`; the model work runs on a blocking thread and clients poll
//! `GET /sessions/{id}` until the state settles.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::mpsc;
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, CorsLayer};
use uuid::Uuid;

use crate::classifier::{AmbiguityScore, Decision};
use crate::lm::LanguageModel;
use crate::metrics::DEFAULT_LAMBDA;
use crate::oracle::{ClarificationError, ClarificationSource};
use crate::pipeline::{
    run_episode_observed, DialogueTranscript, DialogueTurn, EpisodeInput, EpisodeObserver, PipelineConfig, Policy,
    Route, TurnKind,
};
use crate::prompts::{prompt_version, DatasetKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    AwaitingQuestion,
    Classifying,
    AwaitingClarification,
    Answering,
    Done,
    Aborted,
}

impl SessionState {
    pub fn is_terminal(self) -> bool {
        matches!(self, SessionState::Done | SessionState::Aborted)
    }

    pub fn accepts_user_message(self) -> bool {
        matches!(
            self,
            SessionState::AwaitingQuestion | SessionState::AwaitingClarification
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionEvent {
    UserMessage,
    RoutedDirect,
    ClarifyingQuestionAsked,
    Answered,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("event {event:?} is not allowed in state {state:?}")]
pub struct TransitionError {
    pub state: SessionState,
    pub event: SessionEvent,
}

/// The session state machine.
pub fn transition(state: SessionState, event: SessionEvent) -> Result<SessionState, TransitionError> {
    use SessionEvent as E;
    use SessionState as S;
    match (state, event) {
        (S::AwaitingQuestion, E::UserMessage) => Ok(S::Classifying),
        (S::Classifying, E::RoutedDirect) => Ok(S::Answering),
        (S::Classifying, E::ClarifyingQuestionAsked) => Ok(S::AwaitingClarification),
        (S::AwaitingClarification, E::UserMessage) => Ok(S::Answering),
        (S::Answering, E::Answered) => Ok(S::Done),
        (s, E::Failed) if !s.is_terminal() => Ok(S::Aborted),
        (state, event) => Err(TransitionError { state, event }),
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub pipeline: PipelineConfig,
    pub lambda: f64,
    pub dataset: DatasetKind,
    pub clarification_timeout: Duration,
    /// Finished dialogues are appended here in transcript JSONL format.
    pub snapshot_path: Option<PathBuf>,
    /// Allowed browser origin; any origin if unset.
    pub cors_origin: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            lambda: DEFAULT_LAMBDA,
            dataset: DatasetKind::AmbigTrivia,
            clarification_timeout: Duration::from_secs(600),
            snapshot_path: None,
            cors_origin: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub state: SessionState,
    pub policy: Policy,
    pub turns: Vec<DialogueTurn>,
    pub score: Option<AmbiguityScore>,
    pub tau: f64,
    pub decision: Option<Decision>,
    pub final_answer: Option<String>,
    pub error: Option<String>,
    pub created_at_ms: u64,
}

struct SessionData {
    state: SessionState,
    turns: Vec<DialogueTurn>,
    score: Option<AmbiguityScore>,
    decision: Option<Decision>,
    error: Option<String>,
    clarification_tx: Option<mpsc::SyncSender<String>>,
}

struct Session {
    id: String,
    policy: Policy,
    created_at_ms: u64,
    data: Mutex<SessionData>,
}

impl Session {
    fn view(&self, tau: f64) -> SessionView {
        let d = self.data.lock();
        SessionView {
            session_id: self.id.clone(),
            state: d.state,
            policy: self.policy,
            turns: d.turns.clone(),
            score: d.score.clone(),
            tau,
            decision: d.decision,
            final_answer: d
                .turns
                .iter()
                .find(|t| matches!(t.kind, TurnKind::FinalAnswer | TurnKind::DirectAnswer))
                .map(|t| t.text.clone()),
            error: d.error.clone(),
            created_at_ms: self.created_at_ms,
        }
    }

    fn apply(&self, event: SessionEvent) {
        let mut d = self.data.lock();
        match transition(d.state, event) {
            Ok(next) => d.state = next,
            Err(e) => tracing::warn!(session = %self.id, "{e}"),
        }
    }
}

/// Feeds pipeline progress into the session.
struct SessionObserver(Arc<Session>);

impl EpisodeObserver for SessionObserver {
    fn on_score(&self, score: &AmbiguityScore, decision: Decision) {
        let mut d = self.0.data.lock();
        d.score = Some(score.clone());
        d.decision = Some(decision);
    }

    fn on_route(&self, route: Route) {
        if route == Route::Direct {
            self.0.apply(SessionEvent::RoutedDirect);
        }
    }

    fn on_turn(&self, turn: &DialogueTurn) {
        // User turns are recorded by the request handlers.
        if turn.role == crate::pipeline::Role::User {
            return;
        }
        self.0.data.lock().turns.push(turn.clone());
        match turn.kind {
            TurnKind::ClarifyingQuestion => self.0.apply(SessionEvent::ClarifyingQuestionAsked),
            TurnKind::FinalAnswer | TurnKind::DirectAnswer => self.0.apply(SessionEvent::Answered),
            _ => {}
        }
    }
}

/// Blocks the episode until the human replies through the API.
struct LiveClarification {
    rx: Mutex<mpsc::Receiver<String>>,
    timeout: Duration,
}

impl ClarificationSource for LiveClarification {
    fn provide_clarification(&self, clarifying_question: &str, _: &str) -> Result<String, ClarificationError> {
        if clarifying_question.trim().is_empty() {
            return Err(ClarificationError::EmptyQuestion);
        }
        match self.rx.lock().recv_timeout(self.timeout) {
            Ok(text) => Ok(text),
            Err(mpsc::RecvTimeoutError::Timeout) => Err(ClarificationError::Timeout),
            Err(mpsc::RecvTimeoutError::Disconnected) => Err(ClarificationError::Closed),
        }
    }
}

pub struct AppState {
    backend: Option<Arc<dyn LanguageModel>>,
    config: ServiceConfig,
    sessions: RwLock<HashMap<String, Arc<Session>>>,
    snapshot_lock: Mutex<()>,
}

impl AppState {
    /// A service without a backend answers session requests with 503.
    pub fn new(backend: Option<Arc<dyn LanguageModel>>, config: ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            backend,
            config,
            sessions: RwLock::new(HashMap::new()),
            snapshot_lock: Mutex::new(()),
        })
    }

    fn session(&self, id: &str) -> Result<Arc<Session>, ApiError> {
        self.sessions
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("no session {id}")))
    }

    fn snapshot(&self, transcript: &DialogueTranscript) {
        let Some(path) = &self.config.snapshot_path else {
            return;
        };
        let _guard = self.snapshot_lock.lock();
        let line = serde_json::to_string(transcript).expect("transcript serializes") + "\n";
        let written = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .and_then(|mut f| f.write_all(line.as_bytes()));
        if let Err(e) = written {
            tracing::error!(path = %path.display(), "snapshot failed: {e}");
        }
    }
}

#[derive(Debug)]
struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateRequest {
    #[serde(default)]
    policy: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MessageRequest {
    text: String,
}

#[derive(Debug, Serialize)]
struct Created {
    session_id: String,
    state: SessionState,
    policy: Policy,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    body: Bytes,
) -> Result<(StatusCode, Json<Created>), ApiError> {
    if app.backend.is_none() {
        return Err(ApiError(
            StatusCode::SERVICE_UNAVAILABLE,
            "no language-model backend is configured".into(),
        ));
    }
    let request: CreateRequest = if body.iter().all(u8::is_ascii_whitespace) {
        CreateRequest::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError(StatusCode::BAD_REQUEST, e.to_string()))?
    };
    let policy = match request.policy.as_deref() {
        None => Policy::Clam,
        Some(name) => name
            .parse::<Policy>()
            .map_err(|e| ApiError(StatusCode::BAD_REQUEST, e))?,
    };
    let id = Uuid::new_v4().simple().to_string();
    let session = Arc::new(Session {
        id: id.clone(),
        policy,
        created_at_ms: now_ms(),
        data: Mutex::new(SessionData {
            state: SessionState::AwaitingQuestion,
            turns: Vec::new(),
            score: None,
            decision: None,
            error: None,
            clarification_tx: None,
        }),
    });
    app.sessions.write().insert(id.clone(), session);
    Ok((
        StatusCode::CREATED,
        Json(Created {
            session_id: id,
            state: SessionState::AwaitingQuestion,
            policy,
        }),
    ))
}

async fn get_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    let session = app.session(&id)?;
    Ok(Json(session.view(app.config.pipeline.classifier.tau)))
}

async fn post_message(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<MessageRequest>, JsonRejection>,
) -> Result<Json<SessionView>, ApiError> {
    let session = app.session(&id)?;
    let Json(body) = body.map_err(|e| ApiError(StatusCode::BAD_REQUEST, e.body_text()))?;
    let text = body.text.trim().to_string();
    if text.is_empty() {
        return Err(ApiError(StatusCode::BAD_REQUEST, "text must be non-empty".into()));
    }
    let backend = app.backend.clone().ok_or_else(|| {
        ApiError(
            StatusCode::SERVICE_UNAVAILABLE,
            "no language-model backend is configured".into(),
        )
    })?;

    // State check and transition happen under one lock, so of two racing
    // posts exactly one gets through.
    let start_episode = {
        let mut d = session.data.lock();
        let next = transition(d.state, SessionEvent::UserMessage).map_err(|_| {
            ApiError(
                StatusCode::CONFLICT,
                format!("session is {:?} and does not accept messages", d.state),
            )
        })?;
        match d.state {
            SessionState::AwaitingQuestion => {
                d.turns.push(DialogueTurn::new(TurnKind::InitialQuestion, text.clone()));
                d.state = next;
                true
            }
            _ => {
                let tx = d.clarification_tx.take();
                d.turns.push(DialogueTurn::new(TurnKind::Clarification, text.clone()));
                d.state = next;
                if tx.is_none_or(|tx| tx.send(text.clone()).is_err()) {
                    d.state = SessionState::Aborted;
                    d.error = Some("the episode is no longer waiting for a clarification".into());
                }
                false
            }
        }
    };

    if start_episode {
        let (tx, rx) = mpsc::sync_channel(1);
        session.data.lock().clarification_tx = Some(tx);
        let app2 = Arc::clone(&app);
        let session2 = Arc::clone(&session);
        let question = text;
        tokio::task::spawn_blocking(move || run_live_episode(app2, session2, backend, question, rx));
    }
    Ok(Json(session.view(app.config.pipeline.classifier.tau)))
}

fn run_live_episode(
    app: Arc<AppState>,
    session: Arc<Session>,
    backend: Arc<dyn LanguageModel>,
    question: String,
    rx: mpsc::Receiver<String>,
) {
    let input = EpisodeInput::new(session.id.clone(), question, app.config.dataset);
    let live = LiveClarification {
        rx: Mutex::new(rx),
        timeout: app.config.clarification_timeout,
    };
    let clarifier = (session.policy != Policy::DefaultGpt).then_some(&live as &dyn ClarificationSource);
    let observer = SessionObserver(Arc::clone(&session));
    let result = run_episode_observed(
        &input,
        session.policy,
        backend.as_ref(),
        clarifier,
        &app.config.pipeline,
        &observer,
    );
    match result {
        Ok(transcript) => {
            session.data.lock().clarification_tx = None;
            app.snapshot(&transcript);
        }
        Err(e) => {
            tracing::warn!(session = %session.id, "episode failed: {e}");
            let mut d = session.data.lock();
            d.clarification_tx = None;
            d.error = Some(e.failure.to_string());
            if let Ok(next) = transition(d.state, SessionEvent::Failed) {
                d.state = next;
            }
        }
    }
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn config(State(app): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({
        "tau": app.config.pipeline.classifier.tau,
        "lambda": app.config.lambda,
        "backend": app.backend.as_ref().map(|b| b.name()),
        "prompt_version": prompt_version(),
        "dataset": app.config.dataset,
        "policies": Policy::ALL,
        "clarification_timeout_secs": app.config.clarification_timeout.as_secs(),
    }))
}

pub fn router(app: Arc<AppState>) -> Router {
    let origin = match &app.config.cors_origin {
        Some(o) => match o.parse() {
            Ok(v) => AllowOrigin::exact(v),
            Err(_) => {
                tracing::warn!(origin = %o, "invalid CORS origin, allowing any");
                AllowOrigin::any()
            }
        },
        None => AllowOrigin::any(),
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/healthz", get(healthz))
        .route("/config", get(config))
        .layer(cors)
        .with_state(app)
}

/// Serves until the process is stopped.
pub async fn serve(addr: SocketAddr, app: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(app)).await
}
