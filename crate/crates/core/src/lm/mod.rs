//! Language-model boundary.
//!
//! Every model call in the crate goes through [`LanguageModel::complete`]. Two
//! backends are provided: [`ScriptedBackend`], a deterministic rule table used
//! for tests and offline fixtures, and [`OpenAiCompletions`], a blocking client
//! for OpenAI-compatible `/v1/completions` endpoints.
//!
//! Log-probabilities are natural-log values exactly as the backend reports
//! them. Nothing in this module renormalizes them.

mod openai;
mod scripted;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

pub use openai::{OpenAiCompletions, RetryPolicy, API_BASE_ENV, API_KEY_ENV, DEFAULT_API_BASE};
pub use scripted::{rules_from_json, rules_to_json, Matcher, ScriptRule, ScriptedBackend, ScriptedToken};

/// Shared handle to a backend. Backends are `Send + Sync` and may be used
/// from several workers at once.
pub type BackendHandle = Arc<dyn LanguageModel>;

#[derive(Debug, thiserror::Error)]
pub enum LmError {
    #[error("invalid completion request: {0}")]
    InvalidRequest(String),
    #[error("backend not configured: {0}")]
    NotConfigured(String),
    #[error("authentication rejected (HTTP {status})")]
    Authentication { status: u16 },
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    Decode(String),
    #[error("no scripted rule matches call #{call} (prompt starts {prompt_head:?})")]
    NoMatchingRule { call: u64, prompt_head: String },
    #[error("invalid script: {0}")]
    InvalidScript(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    #[serde(default)]
    pub stop: Vec<String>,
    /// Number of candidate log-probabilities requested per position.
    #[serde(default)]
    pub logprob_top_k: u32,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            max_tokens: 16,
            temperature: 0.0,
            stop: Vec::new(),
            logprob_top_k: 0,
        }
    }

    pub fn max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn stop<I, S>(mut self, stop: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.stop = stop.into_iter().map(Into::into).collect();
        self
    }

    pub fn logprob_top_k(mut self, k: u32) -> Self {
        self.logprob_top_k = k;
        self
    }

    pub fn validate(&self) -> Result<(), LmError> {
        if self.prompt.is_empty() {
            return Err(LmError::InvalidRequest("prompt is empty".into()));
        }
        if self.max_tokens == 0 {
            return Err(LmError::InvalidRequest("max_tokens must be at least 1".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(LmError::InvalidRequest(format!(
                "temperature must be a finite value >= 0, got {}",
                self.temperature
            )));
        }
        if self.stop.iter().any(String::is_empty) {
            return Err(LmError::InvalidRequest("stop sequences must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub text: String,
    pub logprob: f64,
    /// Candidates for this position, best first.
    #[serde(default)]
    pub top_alternatives: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    /// Generated text with the stop sequence removed.
    pub text: String,
    pub tokens: Vec<TokenLogprob>,
    pub finish_reason: FinishReason,
}

impl Completion {
    pub fn first_token(&self) -> Option<&TokenLogprob> {
        self.tokens.first()
    }
}

pub trait LanguageModel: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, LmError>;

    /// Short human-readable backend name, reported by the service `/config` endpoint.
    fn name(&self) -> String;
}

impl<T: LanguageModel + ?Sized> LanguageModel for Arc<T> {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, LmError> {
        (**self).complete(request)
    }

    fn name(&self) -> String {
        (**self).name()
    }
}

impl<T: LanguageModel + ?Sized> LanguageModel for &T {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, LmError> {
        (**self).complete(request)
    }

    fn name(&self) -> String {
        (**self).name()
    }
}

/// Request and token counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub requests: u64,
    pub prompt_bytes: u64,
    pub completion_tokens: u64,
}

impl Usage {
    pub fn add(&mut self, other: Usage) {
        self.requests += other.requests;
        self.prompt_bytes += other.prompt_bytes;
        self.completion_tokens += other.completion_tokens;
    }
}

impl std::ops::Add for Usage {
    type Output = Usage;

    fn add(mut self, rhs: Usage) -> Usage {
        Usage::add(&mut self, rhs);
        self
    }
}

impl std::iter::Sum for Usage {
    fn sum<I: Iterator<Item = Usage>>(iter: I) -> Self {
        iter.fold(Usage::default(), |mut acc, u| {
            acc.add(u);
            acc
        })
    }
}

/// Wraps a backend and counts every request passed through it, including
/// ones that fail.
pub struct Metered<B> {
    inner: B,
    requests: AtomicU64,
    prompt_bytes: AtomicU64,
    completion_tokens: AtomicU64,
}

impl<B: LanguageModel> Metered<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            requests: AtomicU64::new(0),
            prompt_bytes: AtomicU64::new(0),
            completion_tokens: AtomicU64::new(0),
        }
    }

    pub fn usage(&self) -> Usage {
        Usage {
            requests: self.requests.load(Ordering::SeqCst),
            prompt_bytes: self.prompt_bytes.load(Ordering::SeqCst),
            completion_tokens: self.completion_tokens.load(Ordering::SeqCst),
        }
    }
}

impl<B: LanguageModel> LanguageModel for Metered<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, LmError> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        self.prompt_bytes
            .fetch_add(request.prompt.len() as u64, Ordering::SeqCst);
        let out = self.inner.complete(request)?;
        self.completion_tokens
            .fetch_add(out.tokens.len() as u64, Ordering::SeqCst);
        Ok(out)
    }

    fn name(&self) -> String {
        self.inner.name()
    }
}

/// Keeps a copy of every prompt sent to the wrapped backend. Used by leakage
/// checks.
pub struct Recording<B> {
    inner: B,
    prompts: Mutex<Vec<String>>,
}

impl<B: LanguageModel> Recording<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            prompts: Mutex::new(Vec::new()),
        }
    }

    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().clone()
    }
}

impl<B: LanguageModel> LanguageModel for Recording<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, LmError> {
        self.prompts.lock().push(request.prompt.clone());
        self.inner.complete(request)
    }

    fn name(&self) -> String {
        self.inner.name()
    }
}
