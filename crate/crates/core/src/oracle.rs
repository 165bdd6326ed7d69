//! Sources of clarifying information.
//!
//! During automatic evaluation the user is simulated by [`Oracle`], a model
//! prompted with the question the user actually meant. Interactive sessions
//! supply their own source that waits for a human reply.

use crate::lm::{CompletionRequest, LanguageModel, LmError};
use crate::metrics::{contained_answer, Normalization};
use crate::prompts::{render_oracle, render_oracle_guarded, PromptError};

#[derive(Debug, thiserror::Error)]
pub enum ClarificationError {
    #[error("clarifying question is empty")]
    EmptyQuestion,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] LmError),
    #[error("privileged text already contains the reference answer {0:?}")]
    PrivilegedLeak(String),
    #[error("oracle reply {reply:?} still contains the reference answer {answer:?} after a guarded retry")]
    Leak { reply: String, answer: String },
    #[error("timed out waiting for the user's clarification")]
    Timeout,
    #[error("the session was closed before a clarification arrived")]
    Closed,
}

pub trait ClarificationSource: Send + Sync {
    /// Replies to `clarifying_question`, which the system asked about
    /// `ambiguous_question`.
    fn provide_clarification(
        &self,
        clarifying_question: &str,
        ambiguous_question: &str,
    ) -> Result<String, ClarificationError>;
}

/// A simulated user with privileged knowledge of what it meant.
pub struct Oracle<'a> {
    backend: &'a dyn LanguageModel,
    intended: String,
    answers: Vec<String>,
    normalization: Normalization,
    max_tokens: u32,
}

impl<'a> Oracle<'a> {
    /// `intended` is the privileged text, e.g. the unambiguous twin of the
    /// question. `answers` are used only to check replies for leakage and
    /// must not appear in `intended`.
    pub fn new(
        backend: &'a dyn LanguageModel,
        intended: impl Into<String>,
        answers: Vec<String>,
    ) -> Result<Self, ClarificationError> {
        let intended = intended.into();
        if intended.trim().is_empty() {
            return Err(PromptError::Empty("intended question").into());
        }
        let normalization = Normalization::default();
        if let Some(a) = contained_answer(&intended, &answers, &normalization) {
            return Err(ClarificationError::PrivilegedLeak(a.to_string()));
        }
        Ok(Self {
            backend,
            intended,
            answers,
            normalization,
            max_tokens: 32,
        })
    }

    pub fn intended(&self) -> &str {
        &self.intended
    }

    fn ask(&self, prompt: String) -> Result<String, ClarificationError> {
        let request = CompletionRequest::new(prompt)
            .max_tokens(self.max_tokens)
            .temperature(0.0)
            .stop(["\n"]);
        let completion = self.backend.complete(&request)?;
        Ok(first_line(&completion.text).to_string())
    }

    fn leaked(&self, reply: &str) -> Option<String> {
        contained_answer(reply, &self.answers, &self.normalization).map(str::to_string)
    }
}

impl ClarificationSource for Oracle<'_> {
    fn provide_clarification(
        &self,
        clarifying_question: &str,
        ambiguous_question: &str,
    ) -> Result<String, ClarificationError> {
        if clarifying_question.trim().is_empty() {
            return Err(ClarificationError::EmptyQuestion);
        }
        let prompt = render_oracle(clarifying_question, &self.intended, ambiguous_question)?;
        let reply = self.ask(prompt.text)?;
        if self.leaked(&reply).is_none() {
            return Ok(reply);
        }
        tracing::debug!(%reply, "oracle reply leaked an answer, retrying with guard");
        let prompt = render_oracle_guarded(clarifying_question, &self.intended, ambiguous_question)?;
        let reply = self.ask(prompt.text)?;
        match self.leaked(&reply) {
            None => Ok(reply),
            Some(answer) => Err(ClarificationError::Leak { reply, answer }),
        }
    }
}

/// Always replies with the same text.
#[derive(Debug, Clone)]
pub struct FixedClarification(String);

impl FixedClarification {
    pub fn new(text: impl Into<String>) -> Self {
        Self(text.into())
    }
}

impl ClarificationSource for FixedClarification {
    fn provide_clarification(&self, clarifying_question: &str, _: &str) -> Result<String, ClarificationError> {
        if clarifying_question.trim().is_empty() {
            return Err(ClarificationError::EmptyQuestion);
        }
        Ok(self.0.clone())
    }
}

fn first_line(text: &str) -> &str {
    text.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("")
}
