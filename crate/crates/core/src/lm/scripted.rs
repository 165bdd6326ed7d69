use std::collections::HashSet;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Completion, CompletionRequest, FinishReason, LanguageModel, LmError, TokenLogprob};

#[derive(Debug, Clone, PartialEq)]
pub enum Matcher {
    Exact(String),
    Contains(String),
    /// Zero-based index of the call on this backend.
    NthCall(u64),
}

impl Matcher {
    fn matches(&self, prompt: &str, call: u64) -> bool {
        match self {
            Matcher::Exact(text) => prompt == text,
            Matcher::Contains(text) => prompt.contains(text.as_str()),
            Matcher::NthCall(n) => *n == call,
        }
    }
}

/// One scripted token with its log-probability and ranked alternatives.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedToken {
    pub token: String,
    pub logprob: f64,
    pub top_logprobs: Vec<(String, f64)>,
}

impl ScriptedToken {
    pub fn new(token: impl Into<String>, logprob: f64) -> Self {
        let token = token.into();
        Self {
            top_logprobs: vec![(token.clone(), logprob)],
            token,
            logprob,
        }
    }

    pub fn with_alternatives(mut self, alternatives: Vec<(String, f64)>) -> Self {
        self.top_logprobs = alternatives;
        sort_alternatives(&mut self.top_logprobs);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptRule {
    pub matcher: Matcher,
    pub response: String,
    /// When present, the tokens concatenate to `response`.
    pub logprobs: Option<Vec<ScriptedToken>>,
}

impl ScriptRule {
    pub fn exact(prompt: impl Into<String>, response: impl Into<String>) -> Self {
        Self::new(Matcher::Exact(prompt.into()), response)
    }

    pub fn contains(needle: impl Into<String>, response: impl Into<String>) -> Self {
        Self::new(Matcher::Contains(needle.into()), response)
    }

    pub fn nth_call(index: u64, response: impl Into<String>) -> Self {
        Self::new(Matcher::NthCall(index), response)
    }

    pub fn new(matcher: Matcher, response: impl Into<String>) -> Self {
        Self {
            matcher,
            response: response.into(),
            logprobs: None,
        }
    }

    pub fn with_logprobs(mut self, tokens: Vec<ScriptedToken>) -> Self {
        self.logprobs = Some(tokens);
        self
    }

    /// A one-token " True"/" False" answer in which " True" carries
    /// `logprob_true` and " False" the complementary mass. The sampled token
    /// is whichever of the two is more likely.
    pub fn true_false(matcher: Matcher, logprob_true: f64) -> Self {
        let logprob_false = (-logprob_true.exp()).ln_1p();
        let mut alternatives = vec![(" True".to_string(), logprob_true)];
        if logprob_false.is_finite() {
            alternatives.push((" False".to_string(), logprob_false));
        }
        let (token, logprob) = if logprob_true >= logprob_false {
            (" True", logprob_true)
        } else {
            (" False", logprob_false)
        };
        Self::new(matcher, token)
            .with_logprobs(vec![ScriptedToken::new(token, logprob).with_alternatives(alternatives)])
    }

    fn validate(&self) -> Result<(), LmError> {
        match &self.matcher {
            Matcher::Exact(t) | Matcher::Contains(t) if t.is_empty() => {
                return Err(LmError::InvalidScript(
                    "exact/contains matcher text must be non-empty".into(),
                ))
            }
            _ => {}
        }
        if let Some(tokens) = &self.logprobs {
            let joined: String = tokens.iter().map(|t| t.token.as_str()).collect();
            if joined != self.response {
                return Err(LmError::InvalidScript(format!(
                    "scripted tokens {joined:?} do not concatenate to response {:?}",
                    self.response
                )));
            }
            let bad = tokens
                .iter()
                .any(|t| !valid_logprob(t.logprob) || t.top_logprobs.iter().any(|(_, lp)| !valid_logprob(*lp)));
            if bad {
                return Err(LmError::InvalidScript(
                    "log-probabilities must be finite and <= 0".into(),
                ));
            }
        }
        Ok(())
    }

    fn tokens(&self) -> Vec<TokenLogprob> {
        match &self.logprobs {
            Some(tokens) => tokens
                .iter()
                .map(|t| TokenLogprob {
                    text: t.token.clone(),
                    logprob: t.logprob,
                    top_alternatives: t.top_logprobs.clone(),
                })
                .collect(),
            None => split_tokens(&self.response)
                .into_iter()
                .map(|text| TokenLogprob {
                    top_alternatives: vec![(text.to_string(), 0.0)],
                    text: text.to_string(),
                    logprob: 0.0,
                })
                .collect(),
        }
    }
}

fn valid_logprob(lp: f64) -> bool {
    lp.is_finite() && lp <= 0.0
}

fn sort_alternatives(alternatives: &mut [(String, f64)]) {
    alternatives.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}

/// Pseudo-tokenization for scripted responses without explicit tokens: each
/// token is a run of whitespace followed by a run of non-whitespace.
fn split_tokens(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut seen_word = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() && seen_word {
            out.push(&text[start..i]);
            start = i;
            seen_word = false;
        } else if !c.is_whitespace() {
            seen_word = true;
        }
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

/// Deterministic rule-table backend.
///
/// Rules are evaluated in declaration order and the first match wins. The
/// output is a pure function of the request and the zero-based call index.
#[derive(Debug)]
pub struct ScriptedBackend {
    rules: Vec<ScriptRule>,
    calls: AtomicU64,
    name: String,
}

impl ScriptedBackend {
    pub fn new(rules: Vec<ScriptRule>) -> Result<Self, LmError> {
        if rules.is_empty() {
            return Err(LmError::NotConfigured("scripted backend has no rules".into()));
        }
        let mut exact = HashSet::new();
        for rule in &rules {
            rule.validate()?;
            if let Matcher::Exact(text) = &rule.matcher {
                if !exact.insert(text.as_str()) {
                    return Err(LmError::InvalidScript(format!("duplicate exact matcher {text:?}")));
                }
            }
        }
        Ok(Self {
            rules,
            calls: AtomicU64::new(0),
            name: "scripted".into(),
        })
    }

    pub fn from_json_str(json: &str) -> Result<Self, LmError> {
        Self::new(rules_from_json(json)?)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, LmError> {
        let path = path.as_ref();
        let json =
            std::fs::read_to_string(path).map_err(|e| LmError::NotConfigured(format!("{}: {e}", path.display())))?;
        let mut backend = Self::from_json_str(&json)?;
        backend.name = format!("scripted:{}", path.display());
        Ok(backend)
    }

    pub fn rules(&self) -> &[ScriptRule] {
        &self.rules
    }

    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl LanguageModel for ScriptedBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, LmError> {
        request.validate()?;
        let call = self.calls.fetch_add(1, Ordering::SeqCst);
        let rule = self
            .rules
            .iter()
            .find(|r| r.matcher.matches(&request.prompt, call))
            .ok_or_else(|| LmError::NoMatchingRule {
                call,
                prompt_head: request.prompt.chars().take(60).collect(),
            })?;
        Ok(shape_completion(rule, request))
    }

    fn name(&self) -> String {
        self.name.clone()
    }
}

/// Applies stop sequences, `max_tokens` and `logprob_top_k` to a scripted response.
fn shape_completion(rule: &ScriptRule, request: &CompletionRequest) -> Completion {
    let stop_hit = request
        .stop
        .iter()
        .filter_map(|s| rule.response.find(s.as_str()).map(|i| (i, s)))
        .min_by(|a, b| a.0.cmp(&b.0).then(b.1.len().cmp(&a.1.len())));
    let visible_len = stop_hit.map_or(rule.response.len(), |(i, _)| i);

    let mut tokens = Vec::new();
    let mut offset = 0;
    for mut token in rule.tokens() {
        if offset >= visible_len {
            break;
        }
        let end = offset + token.text.len();
        if end > visible_len {
            token.text.truncate(visible_len - offset);
        }
        offset = end;
        tokens.push(token);
    }

    let finish_reason;
    if tokens.len() > request.max_tokens as usize {
        tokens.truncate(request.max_tokens as usize);
        finish_reason = FinishReason::Length;
    } else {
        finish_reason = FinishReason::Stop;
        if let Some((_, stop)) = stop_hit {
            tokens.push(TokenLogprob {
                text: stop.clone(),
                logprob: 0.0,
                top_alternatives: vec![(stop.clone(), 0.0)],
            });
        }
    }
    let k = request.logprob_top_k as usize;
    for token in &mut tokens {
        token.top_alternatives.truncate(k);
    }

    let mut text: String = tokens.iter().map(|t| t.text.as_str()).collect();
    if finish_reason == FinishReason::Stop {
        if let Some((_, stop)) = stop_hit {
            text.truncate(text.len() - stop.len());
        }
    }
    Completion {
        text,
        tokens,
        finish_reason,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RuleRecord {
    matcher_kind: String,
    matcher_value: Value,
    response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    logprobs: Option<Vec<TokenRecord>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TokenRecord {
    token: String,
    logprob: f64,
    #[serde(default)]
    top_logprobs: serde_json::Map<String, Value>,
}

/// Parses a rule file: a JSON array of
/// `{matcher_kind, matcher_value, response, logprobs?}` objects.
pub fn rules_from_json(json: &str) -> Result<Vec<ScriptRule>, LmError> {
    let records: Vec<RuleRecord> = serde_json::from_str(json).map_err(|e| LmError::InvalidScript(e.to_string()))?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let bad = |msg: &str| LmError::InvalidScript(format!("rule {i}: {msg}"));
            let matcher = match (r.matcher_kind.as_str(), &r.matcher_value) {
                ("exact", Value::String(s)) => Matcher::Exact(s.clone()),
                ("contains", Value::String(s)) => Matcher::Contains(s.clone()),
                ("nth_call", v) => {
                    Matcher::NthCall(v.as_u64().ok_or_else(|| bad("nth_call needs a non-negative integer"))?)
                }
                (kind, _) => return Err(bad(&format!("unsupported matcher {kind:?}"))),
            };
            let logprobs = r
                .logprobs
                .map(|tokens| {
                    tokens
                        .into_iter()
                        .map(|t| {
                            let alternatives = t
                                .top_logprobs
                                .into_iter()
                                .map(|(k, v)| {
                                    v.as_f64()
                                        .map(|lp| (k, lp))
                                        .ok_or_else(|| bad("top_logprobs values must be numbers"))
                                })
                                .collect::<Result<Vec<_>, _>>()?;
                            let token = ScriptedToken::new(t.token, t.logprob);
                            Ok(if alternatives.is_empty() {
                                token
                            } else {
                                token.with_alternatives(alternatives)
                            })
                        })
                        .collect::<Result<Vec<_>, LmError>>()
                })
                .transpose()?;
            Ok(ScriptRule {
                matcher,
                response: r.response,
                logprobs,
            })
        })
        .collect()
}

pub fn rules_to_json(rules: &[ScriptRule]) -> String {
    let records: Vec<RuleRecord> = rules
        .iter()
        .map(|r| {
            let (kind, value) = match &r.matcher {
                Matcher::Exact(s) => ("exact", Value::from(s.clone())),
                Matcher::Contains(s) => ("contains", Value::from(s.clone())),
                Matcher::NthCall(n) => ("nth_call", Value::from(*n)),
            };
            RuleRecord {
                matcher_kind: kind.into(),
                matcher_value: value,
                response: r.response.clone(),
                logprobs: r.logprobs.as_ref().map(|tokens| {
                    tokens
                        .iter()
                        .map(|t| TokenRecord {
                            token: t.token.clone(),
                            logprob: t.logprob,
                            top_logprobs: t
                                .top_logprobs
                                .iter()
                                .map(|(k, v)| (k.clone(), Value::from(*v)))
                                .collect(),
                        })
                        .collect()
                }),
            }
        })
        .collect();
    serde_json::to_string_pretty(&records).expect("rule records serialize")
}
