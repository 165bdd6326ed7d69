//! Question-answering episodes under the four policies.
//!
//! A [`Policy::Clam`] episode scores the question for ambiguity, and only when
//! the score clears the threshold does it ask a clarifying question, obtain
//! the user's clarification, and answer from the whole dialogue. The other
//! policies are the comparison points: always answer directly, let the model
//! decide by itself whether to ask, or always ask.

use std::fmt;
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::classifier::{ambiguity_score, classify, AmbiguityScore, ClassifierConfig, ClassifyError, Decision};
use crate::corpus::{capabilities, Capability};
use crate::lm::{CompletionRequest, LanguageModel, LmError};
use crate::oracle::{ClarificationError, ClarificationSource};
use crate::prompts::{render_answer_with, render_clarify, AnswerHeader, DatasetKind, PromptError, QuestionContext};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Clam,
    DefaultGpt,
    PromptingBaseline,
    ForceClarify,
}

impl Policy {
    pub const ALL: [Policy; 4] = [
        Policy::DefaultGpt,
        Policy::PromptingBaseline,
        Policy::ForceClarify,
        Policy::Clam,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::Clam => "clam",
            Policy::DefaultGpt => "default_gpt",
            Policy::PromptingBaseline => "prompting_baseline",
            Policy::ForceClarify => "force_clarify",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Policy::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown policy {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnKind {
    InitialQuestion,
    ClarifyingQuestion,
    Clarification,
    FinalAnswer,
    DirectAnswer,
}

impl TurnKind {
    pub fn role(self) -> Role {
        match self {
            TurnKind::InitialQuestion | TurnKind::Clarification => Role::User,
            TurnKind::ClarifyingQuestion | TurnKind::FinalAnswer | TurnKind::DirectAnswer => Role::Assistant,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTurn")]
pub struct DialogueTurn {
    pub role: Role,
    pub kind: TurnKind,
    pub text: String,
}

#[derive(Deserialize)]
struct RawTurn {
    role: Role,
    kind: TurnKind,
    text: String,
}

impl TryFrom<RawTurn> for DialogueTurn {
    type Error = String;

    fn try_from(raw: RawTurn) -> Result<Self, Self::Error> {
        if raw.kind.role() != raw.role {
            return Err(format!("{:?} turns must have role {:?}", raw.kind, raw.kind.role()));
        }
        if raw.text.is_empty() {
            return Err("turn text must be non-empty".into());
        }
        Ok(DialogueTurn {
            role: raw.role,
            kind: raw.kind,
            text: raw.text,
        })
    }
}

impl DialogueTurn {
    /// The role is derived from the kind.
    pub fn new(kind: TurnKind, text: impl Into<String>) -> Self {
        Self {
            role: kind.role(),
            kind,
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timestamps {
    pub started_ms: u64,
    pub finished_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueTranscript {
    pub question_id: String,
    pub policy: Policy,
    pub turns: Vec<DialogueTurn>,
    #[serde(rename = "score")]
    pub ambiguity_score: Option<AmbiguityScore>,
    pub asked_clarification: bool,
    pub final_answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamps: Option<Timestamps>,
}

const DIRECT_SHAPE: [TurnKind; 2] = [TurnKind::InitialQuestion, TurnKind::DirectAnswer];
const CLARIFIED_SHAPE: [TurnKind; 4] = [
    TurnKind::InitialQuestion,
    TurnKind::ClarifyingQuestion,
    TurnKind::Clarification,
    TurnKind::FinalAnswer,
];

impl DialogueTranscript {
    pub fn kinds(&self) -> Vec<TurnKind> {
        self.turns.iter().map(|t| t.kind).collect()
    }

    pub fn clarifying_question(&self) -> Option<&str> {
        self.turn_text(TurnKind::ClarifyingQuestion)
    }

    pub fn clarification(&self) -> Option<&str> {
        self.turn_text(TurnKind::Clarification)
    }

    fn turn_text(&self, kind: TurnKind) -> Option<&str> {
        self.turns.iter().find(|t| t.kind == kind).map(|t| t.text.as_str())
    }

    /// Checks the structural invariants of a finished transcript.
    pub fn validate(&self) -> Result<(), String> {
        let kinds = self.kinds();
        if kinds != DIRECT_SHAPE && kinds != CLARIFIED_SHAPE {
            return Err(format!("illegal turn sequence {kinds:?}"));
        }
        if let Some(t) = self.turns.iter().find(|t| t.role != t.kind.role() || t.text.is_empty()) {
            return Err(format!("malformed turn {t:?}"));
        }
        if self.asked_clarification != (kinds == CLARIFIED_SHAPE) {
            return Err("asked_clarification disagrees with the turns".into());
        }
        if self.turns.last().map(|t| t.text.as_str()) != Some(self.final_answer.as_str()) {
            return Err("final_answer is not the last turn".into());
        }
        if self.policy == Policy::Clam && self.ambiguity_score.is_none() {
            return Err("clam transcript without a score".into());
        }
        Ok(())
    }
}

/// True iff a model reply reads as a request for clarification: it ends
/// with a question mark or opens with an interrogative cue.
pub fn detect_clarification_request(response: &str) -> bool {
    const CUES: [&str; 8] = [
        "who ",
        "what ",
        "which ",
        "when ",
        "where ",
        "do you",
        "are you",
        "could you",
    ];
    let trimmed = response.trim();
    if trimmed.ends_with('?') {
        return true;
    }
    let lower = trimmed.to_lowercase();
    CUES.iter().any(|cue| lower.starts_with(cue))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub classifier: ClassifierConfig,
    /// Token budget for clarifying questions and answers.
    pub max_tokens: u32,
    pub temperature: f64,
    pub stop: Vec<String>,
    pub record_timestamps: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            classifier: ClassifierConfig::default(),
            max_tokens: 64,
            temperature: 0.0,
            stop: vec!["\n###".into(), "\nUser:".into(), "\nQ:".into()],
            record_timestamps: false,
        }
    }
}

/// One question to run an episode on.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeInput {
    pub question_id: String,
    pub question: String,
    pub context: Option<QuestionContext>,
    pub dataset: DatasetKind,
    /// Reused instead of querying the detector again, if present.
    pub score: Option<AmbiguityScore>,
}

impl EpisodeInput {
    pub fn new(question_id: impl Into<String>, question: impl Into<String>, dataset: DatasetKind) -> Self {
        Self {
            question_id: question_id.into(),
            question: question.into(),
            context: None,
            dataset,
            score: None,
        }
    }

    pub fn with_context(mut self, context: QuestionContext) -> Self {
        self.context = Some(context);
        self
    }

    pub fn with_score(mut self, score: AmbiguityScore) -> Self {
        self.score = Some(score);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Direct,
    Clarify,
}

/// Progress callbacks for a running episode. All methods default to no-ops.
pub trait EpisodeObserver: Send + Sync {
    fn on_score(&self, _score: &AmbiguityScore, _decision: Decision) {}
    fn on_route(&self, _route: Route) {}
    fn on_turn(&self, _turn: &DialogueTurn) {}
}

pub struct NoopObserver;

impl EpisodeObserver for NoopObserver {}

#[derive(Debug, thiserror::Error)]
pub enum EpisodeFailure {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Backend(#[from] LmError),
    #[error("clarification failed: {0}")]
    Clarification(#[from] ClarificationError),
    #[error("model returned an empty {0}")]
    EmptyGeneration(&'static str),
    #[error("policy {0} may ask for clarification but no clarification source was given")]
    MissingClarifier(Policy),
    #[error("{0} questions cannot be used for question-answering episodes")]
    Unsupported(DatasetKind),
}

/// A failed episode together with the turns completed before the failure.
#[derive(Debug, thiserror::Error)]
#[error("episode {} failed: {failure}", partial.question_id)]
pub struct EpisodeError {
    pub failure: EpisodeFailure,
    pub partial: Box<DialogueTranscript>,
}

pub fn run_episode(
    input: &EpisodeInput,
    policy: Policy,
    backend: &dyn LanguageModel,
    clarifier: Option<&dyn ClarificationSource>,
    config: &PipelineConfig,
) -> Result<DialogueTranscript, EpisodeError> {
    run_episode_observed(input, policy, backend, clarifier, config, &NoopObserver)
}

pub fn run_episode_observed(
    input: &EpisodeInput,
    policy: Policy,
    backend: &dyn LanguageModel,
    clarifier: Option<&dyn ClarificationSource>,
    config: &PipelineConfig,
    observer: &dyn EpisodeObserver,
) -> Result<DialogueTranscript, EpisodeError> {
    let mut episode = Episode {
        input,
        backend,
        clarifier,
        config,
        observer,
        started_ms: now_ms(),
        transcript: DialogueTranscript {
            question_id: input.question_id.clone(),
            policy,
            turns: Vec::new(),
            ambiguity_score: None,
            asked_clarification: false,
            final_answer: String::new(),
            timestamps: None,
        },
    };
    match episode.run() {
        Ok(()) => Ok(episode.finish()),
        Err(failure) => Err(EpisodeError {
            failure,
            partial: Box::new(episode.finish()),
        }),
    }
}

struct Episode<'a> {
    input: &'a EpisodeInput,
    backend: &'a dyn LanguageModel,
    clarifier: Option<&'a dyn ClarificationSource>,
    config: &'a PipelineConfig,
    observer: &'a dyn EpisodeObserver,
    started_ms: u64,
    transcript: DialogueTranscript,
}

impl Episode<'_> {
    fn run(&mut self) -> Result<(), EpisodeFailure> {
        let input = self.input;
        let policy = self.transcript.policy;
        if !capabilities(input.dataset).supports(Capability::FinalAccuracyAmbiguous) {
            return Err(EpisodeFailure::Unsupported(input.dataset));
        }
        if policy != Policy::DefaultGpt && self.clarifier.is_none() {
            return Err(EpisodeFailure::MissingClarifier(policy));
        }
        self.push(TurnKind::InitialQuestion, input.question.clone());

        match policy {
            Policy::DefaultGpt => {
                self.observer.on_route(Route::Direct);
                self.answer(TurnKind::DirectAnswer, AnswerHeader::Plain)
            }
            Policy::ForceClarify => {
                self.observer.on_route(Route::Clarify);
                self.clarify_and_answer()
            }
            Policy::Clam => {
                let score = match &input.score {
                    Some(s) => s.clone(),
                    None => ambiguity_score(
                        &input.question_id,
                        &input.question,
                        input.context.as_ref(),
                        input.dataset,
                        self.backend,
                        &self.config.classifier,
                    )?,
                };
                let decision = classify(&score, &self.config.classifier);
                self.observer.on_score(&score, decision);
                self.transcript.ambiguity_score = Some(score);
                match decision {
                    Decision::Ambiguous => {
                        self.observer.on_route(Route::Clarify);
                        self.clarify_and_answer()
                    }
                    Decision::Unambiguous => {
                        self.observer.on_route(Route::Direct);
                        self.answer(TurnKind::DirectAnswer, AnswerHeader::Plain)
                    }
                }
            }
            Policy::PromptingBaseline => {
                let prompt = render_answer_with(
                    &self.transcript.turns,
                    AnswerHeader::InviteClarification,
                    input.context.as_ref(),
                )?;
                let reply = self.generate(prompt.text, "reply")?;
                if detect_clarification_request(&reply) {
                    self.observer.on_route(Route::Clarify);
                    self.push(TurnKind::ClarifyingQuestion, reply);
                    self.obtain_clarification()?;
                    self.answer(TurnKind::FinalAnswer, AnswerHeader::InviteClarification)
                } else {
                    self.observer.on_route(Route::Direct);
                    self.push(TurnKind::DirectAnswer, reply);
                    Ok(())
                }
            }
        }
    }

    fn clarify_and_answer(&mut self) -> Result<(), EpisodeFailure> {
        let input = self.input;
        let prompt = render_clarify(
            &input.question,
            input.dataset,
            input.context.as_ref().map(QuestionContext::prior_turns),
        )?;
        let question = self.generate(prompt.text, "clarifying question")?;
        let question = first_line(&question).to_string();
        self.push(TurnKind::ClarifyingQuestion, question);
        self.obtain_clarification()?;
        self.answer(TurnKind::FinalAnswer, AnswerHeader::Plain)
    }

    fn obtain_clarification(&mut self) -> Result<(), EpisodeFailure> {
        let clarifier = self
            .clarifier
            .ok_or(EpisodeFailure::MissingClarifier(self.transcript.policy))?;
        let asked = self.transcript.clarifying_question().unwrap_or_default().to_string();
        let text = clarifier.provide_clarification(&asked, &self.input.question)?;
        if text.trim().is_empty() {
            return Err(EpisodeFailure::EmptyGeneration("clarification"));
        }
        self.push(TurnKind::Clarification, text);
        Ok(())
    }

    fn answer(&mut self, kind: TurnKind, header: AnswerHeader) -> Result<(), EpisodeFailure> {
        let prompt = render_answer_with(&self.transcript.turns, header, self.input.context.as_ref())?;
        let answer = self.generate(prompt.text, "answer")?;
        self.push(kind, answer);
        Ok(())
    }

    fn generate(&self, prompt: String, what: &'static str) -> Result<String, EpisodeFailure> {
        let request = CompletionRequest::new(prompt)
            .max_tokens(self.config.max_tokens)
            .temperature(self.config.temperature)
            .stop(self.config.stop.iter().cloned());
        let completion = self.backend.complete(&request)?;
        let text = completion.text.trim();
        if text.is_empty() {
            return Err(EpisodeFailure::EmptyGeneration(what));
        }
        Ok(text.to_string())
    }

    fn push(&mut self, kind: TurnKind, text: String) {
        let turn = DialogueTurn::new(kind, text);
        self.observer.on_turn(&turn);
        if kind == TurnKind::ClarifyingQuestion {
            self.transcript.asked_clarification = true;
        }
        if matches!(kind, TurnKind::FinalAnswer | TurnKind::DirectAnswer) {
            self.transcript.final_answer = turn.text.clone();
        }
        self.transcript.turns.push(turn);
    }

    fn finish(self) -> DialogueTranscript {
        let mut transcript = self.transcript;
        if self.config.record_timestamps {
            transcript.timestamps = Some(Timestamps {
                started_ms: self.started_ms,
                finished_ms: now_ms(),
            });
        }
        transcript
    }
}

fn first_line(text: &str) -> &str {
    text.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or(text)
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}
