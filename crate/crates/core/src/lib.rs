//! Selective clarification for question answering.
//!
//! A language model first judges whether a question is ambiguous from the
//! log-probability of a "True" label after a few-shot prompt. Ambiguous
//! questions get one clarifying question before the answer; the rest are
//! answered directly. The crate also provides the simulated user used for
//! automatic evaluation, corpus loaders, metrics, an experiment runner and an
//! HTTP session service.

pub mod classifier;
pub mod corpus;
pub mod lm;
pub mod metrics;
pub mod oracle;
pub mod pipeline;
pub mod prompts;
pub mod runner;
pub mod service;

pub use classifier::{ambiguity_score, classify, AmbiguityScore, ClassifierConfig, Decision};
pub use corpus::{EvalItem, LabeledQuestion, QuestionPair};
pub use lm::{Completion, CompletionRequest, LanguageModel, ScriptRule, ScriptedBackend};
pub use metrics::{aggregate, auroc, EvalRecord, MetricsConfig, MetricsReport};
pub use oracle::{ClarificationSource, FixedClarification, Oracle};
pub use pipeline::{run_episode, DialogueTranscript, DialogueTurn, PipelineConfig, Policy};
pub use prompts::{DatasetKind, QuestionContext};
