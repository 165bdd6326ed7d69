use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use super::{Completion, CompletionRequest, FinishReason, LanguageModel, LmError, TokenLogprob};

pub const API_KEY_ENV: &str = "CLAM_API_KEY";
pub const API_BASE_ENV: &str = "CLAM_API_BASE";
pub const DEFAULT_API_BASE: &str = "https://api.openai.com";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_secs(1),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based): exponential, capped, and
    /// jittered into `[delay/2, delay]`.
    fn delay(&self, retry: u32) -> Duration {
        let exp = self
            .base_delay
            .saturating_mul(2u32.saturating_pow(retry))
            .min(self.max_delay);
        let factor = rand::rng().random_range(0.5..=1.0);
        exp.mul_f64(factor)
    }
}

/// Blocking client for OpenAI-compatible `/v1/completions` endpoints.
pub struct OpenAiCompletions {
    base_url: String,
    api_key: String,
    model: String,
    retry: RetryPolicy,
    client: reqwest::blocking::Client,
}

impl std::fmt::Debug for OpenAiCompletions {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OpenAiCompletions")
            .field("base_url", &self.base_url)
            .field("model", &self.model)
            .finish_non_exhaustive()
    }
}

impl OpenAiCompletions {
    pub fn new(
        base_url: impl Into<String>,
        api_key: impl Into<String>,
        model: impl Into<String>,
    ) -> Result<Self, LmError> {
        let api_key = api_key.into();
        if api_key.is_empty() {
            return Err(LmError::NotConfigured("API key is empty".into()));
        }
        let base_url = base_url.into().trim_end_matches('/').to_string();
        if base_url.is_empty() {
            return Err(LmError::NotConfigured("endpoint URL is empty".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| LmError::NotConfigured(e.to_string()))?;
        Ok(Self {
            base_url,
            api_key,
            model: model.into(),
            retry: RetryPolicy::default(),
            client,
        })
    }

    /// Reads the credential from `CLAM_API_KEY` and an optional endpoint
    /// override from `CLAM_API_BASE`.
    pub fn from_env(model: impl Into<String>) -> Result<Self, LmError> {
        let key =
            std::env::var(API_KEY_ENV).map_err(|_| LmError::NotConfigured(format!("{API_KEY_ENV} is not set")))?;
        let base = std::env::var(API_BASE_ENV).unwrap_or_else(|_| DEFAULT_API_BASE.to_string());
        Self::new(base, key, model)
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn endpoint(&self) -> String {
        format!("{}/v1/completions", self.base_url)
    }

    fn attempt(&self, body: &WireRequest<'_>) -> Result<Completion, Attempt> {
        let response = self
            .client
            .post(self.endpoint())
            .bearer_auth(&self.api_key)
            .json(body)
            .send()
            .map_err(|e| Attempt::Retryable(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response.text().map_err(|e| Attempt::Retryable(e.to_string()))?;
        match status {
            200..=299 => parse_response(&text).map_err(Attempt::Fatal),
            401 | 403 => Err(Attempt::Fatal(LmError::Authentication { status })),
            429 | 500..=599 => Err(Attempt::Retryable(format!("HTTP {status}: {text}"))),
            _ => Err(Attempt::Fatal(LmError::Http { status, body: text })),
        }
    }
}

enum Attempt {
    Retryable(String),
    Fatal(LmError),
}

impl LanguageModel for OpenAiCompletions {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, LmError> {
        request.validate()?;
        let body = WireRequest {
            model: &self.model,
            prompt: &request.prompt,
            max_tokens: request.max_tokens,
            temperature: request.temperature,
            stop: (!request.stop.is_empty()).then_some(request.stop.as_slice()),
            logprobs: (request.logprob_top_k > 0).then_some(request.logprob_top_k),
        };
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&body) {
                Ok(c) => return Ok(c),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retryable(message)) => {
                    if attempts > self.retry.max_retries {
                        return Err(LmError::Transport { attempts, message });
                    }
                    let delay = self.retry.delay(attempts - 1);
                    warn!(attempts, ?delay, %message, "completion request failed, retrying");
                    std::thread::sleep(delay);
                }
            }
        }
    }

    fn name(&self) -> String {
        format!("openai:{}", self.model)
    }
}

#[derive(Debug, Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    stop: Option<&'a [String]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    logprobs: Option<u32>,
}

#[derive(Debug, Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Debug, Deserialize)]
struct WireChoice {
    text: String,
    #[serde(default)]
    logprobs: Option<WireLogprobs>,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Debug, Deserialize)]
struct WireLogprobs {
    #[serde(default)]
    tokens: Vec<String>,
    #[serde(default)]
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    top_logprobs: Option<Vec<Option<serde_json::Map<String, serde_json::Value>>>>,
}

fn parse_response(body: &str) -> Result<Completion, LmError> {
    let wire: WireResponse = serde_json::from_str(body).map_err(|e| LmError::Decode(e.to_string()))?;
    let choice = wire
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| LmError::Decode("response has no choices".into()))?;
    let finish_reason = match choice.finish_reason.as_deref() {
        Some("stop") => FinishReason::Stop,
        Some("length") => FinishReason::Length,
        _ => FinishReason::Other,
    };
    let mut tokens = Vec::new();
    if let Some(lp) = choice.logprobs {
        if lp.tokens.len() != lp.token_logprobs.len() {
            return Err(LmError::Decode("tokens and token_logprobs differ in length".into()));
        }
        let tops = lp.top_logprobs.unwrap_or_default();
        for (i, (text, logprob)) in lp.tokens.into_iter().zip(lp.token_logprobs).enumerate() {
            let logprob = logprob.ok_or_else(|| LmError::Decode(format!("token {i} has a null logprob")))?;
            let mut top_alternatives = Vec::new();
            if let Some(Some(map)) = tops.get(i) {
                for (tok, value) in map {
                    let v = value
                        .as_f64()
                        .ok_or_else(|| LmError::Decode(format!("top_logprobs[{i}][{tok:?}] is not a number")))?;
                    top_alternatives.push((tok.clone(), v));
                }
            }
            top_alternatives.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            tokens.push(TokenLogprob {
                text,
                logprob,
                top_alternatives,
            });
        }
    }
    debug!(tokens = tokens.len(), "parsed completion");
    Ok(Completion {
        text: choice.text,
        tokens,
        finish_reason,
    })
}
