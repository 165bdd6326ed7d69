//! Prompt templates for every model call.
//!
//! Templates live as UTF-8 files under `prompts/` in this crate and are
//! compiled in with `include_str!`. Slots are written `{name}` and are filled in
//! a single pass, so substituted text is never re-scanned for slots.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::pipeline::{DialogueTurn, Role};

const AMBIG_TRIVIA_DETECT: &str = include_str!("../prompts/ambig_trivia.detect.txt");
const AMBIG_TRIVIA_CLARIFY: &str = include_str!("../prompts/ambig_trivia.clarify.txt");
const CLARIQ_DETECT: &str = include_str!("../prompts/clariq.detect.txt");
const CLAQUA_SINGLE_DETECT: &str = include_str!("../prompts/claqua_single.detect.txt");
const CLAQUA_SINGLE_CLARIFY: &str = include_str!("../prompts/claqua_single.clarify.txt");
const CLAQUA_MULTI_DETECT: &str = include_str!("../prompts/claqua_multi.detect.txt");
const CLAQUA_MULTI_CLARIFY: &str = include_str!("../prompts/claqua_multi.clarify.txt");
const ANSWER_HEADER: &str = include_str!("../prompts/answer.header.txt");
const PROMPTING_BASELINE_HEADER: &str = include_str!("../prompts/prompting_baseline.header.txt");
const ORACLE: &str = include_str!("../prompts/oracle.txt");

/// Final cue of the ambiguity-detection prompts for trivia-style datasets.
pub const DETECT_CUE: &str = "This question is ambiguous:";
/// Extra instruction inserted into the oracle prompt when its first answer
/// leaked a reference answer.
pub const ORACLE_GUARD_INSTRUCTION: &str = "Do not answer the original question. ";

/// All template resources, keyed by file name.
pub const TEMPLATES: &[(&str, &str)] = &[
    ("ambig_trivia.detect.txt", AMBIG_TRIVIA_DETECT),
    ("ambig_trivia.clarify.txt", AMBIG_TRIVIA_CLARIFY),
    ("clariq.detect.txt", CLARIQ_DETECT),
    ("claqua_single.detect.txt", CLAQUA_SINGLE_DETECT),
    ("claqua_single.clarify.txt", CLAQUA_SINGLE_CLARIFY),
    ("claqua_multi.detect.txt", CLAQUA_MULTI_DETECT),
    ("claqua_multi.clarify.txt", CLAQUA_MULTI_CLARIFY),
    ("answer.header.txt", ANSWER_HEADER),
    ("prompting_baseline.header.txt", PROMPTING_BASELINE_HEADER),
    ("oracle.txt", ORACLE),
];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("{0} must be non-empty")]
    Empty(&'static str),
    #[error("{dataset} does not support the {step} step")]
    Unsupported { dataset: DatasetKind, step: PromptStep },
    #[error("{dataset} prompts need {needed} context")]
    MissingContext { dataset: DatasetKind, needed: &'static str },
    #[error("dialogue must start with the user's question")]
    BadDialogue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    AmbigTrivia,
    #[serde(rename = "clariq")]
    ClariQ,
    ClaquaSingle,
    ClaquaMulti,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 4] = [
        DatasetKind::AmbigTrivia,
        DatasetKind::ClariQ,
        DatasetKind::ClaquaSingle,
        DatasetKind::ClaquaMulti,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::AmbigTrivia => "ambig_trivia",
            DatasetKind::ClariQ => "clariq",
            DatasetKind::ClaquaSingle => "claqua_single",
            DatasetKind::ClaquaMulti => "claqua_multi",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DatasetKind::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| format!("unknown dataset kind {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStep {
    Detect,
    Clarify,
    Answer,
    Oracle,
}

impl fmt::Display for PromptStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptStep::Detect => "detect",
            PromptStep::Clarify => "clarify",
            PromptStep::Answer => "answer",
            PromptStep::Oracle => "oracle",
        })
    }
}

/// Dataset-specific side information shown to the model with the question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QuestionContext {
    /// Two same-named entities; the question may refer to either.
    Entities {
        entity_name: String,
        entity1: String,
        entity2: String,
    },
    /// Earlier conversation turns (user first, alternating) and the two
    /// entities they mention.
    Conversation {
        entity1: String,
        entity2: String,
        entity1_description: String,
        entity2_description: String,
        prior_turns: Vec<String>,
    },
}

impl QuestionContext {
    pub fn prior_turns(&self) -> &[String] {
        match self {
            QuestionContext::Conversation { prior_turns, .. } => prior_turns,
            QuestionContext::Entities { .. } => &[],
        }
    }

    /// Lines describing the entities, as they appear before a dialogue.
    fn context_lines(&self) -> Vec<String> {
        match self {
            QuestionContext::Entities { entity1, entity2, .. } => {
                vec![format!("Context: {entity1}"), format!("Context: {entity2}")]
            }
            QuestionContext::Conversation {
                entity1_description,
                entity2_description,
                ..
            } => vec![
                format!("Context: {entity1_description}"),
                format!("Context: {entity2_description}"),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptText {
    pub text: String,
    pub step: PromptStep,
    pub dataset: Option<DatasetKind>,
}

fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let slot = after
            .find('}')
            .map(|close| &after[..close])
            .and_then(|name| vars.iter().find(|(k, _)| *k == name));
        match slot {
            Some((name, value)) => {
                out.push_str(value);
                rest = &after[name.len() + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

fn non_empty(value: &str, what: &'static str) -> Result<(), PromptError> {
    if value.trim().is_empty() {
        Err(PromptError::Empty(what))
    } else {
        Ok(())
    }
}

/// Few-shot ambiguity-detection prompt with `question` in the final slot.
pub fn render_detect(
    question: &str,
    context: Option<&QuestionContext>,
    dataset: DatasetKind,
) -> Result<PromptText, PromptError> {
    non_empty(question, "question")?;
    let text = match (dataset, context) {
        (DatasetKind::AmbigTrivia, _) => fill(AMBIG_TRIVIA_DETECT, &[("question", question)]),
        (DatasetKind::ClariQ, _) => fill(CLARIQ_DETECT, &[("question", question)]),
        (
            DatasetKind::ClaquaSingle,
            Some(QuestionContext::Entities {
                entity_name,
                entity1,
                entity2,
            }),
        ) => fill(
            CLAQUA_SINGLE_DETECT,
            &[
                ("entity1", entity1),
                ("entity2", entity2),
                ("question", question),
                ("entity_name", entity_name),
            ],
        ),
        (DatasetKind::ClaquaSingle, _) => {
            return Err(PromptError::MissingContext {
                dataset,
                needed: "entity",
            })
        }
        (DatasetKind::ClaquaMulti, Some(ctx @ QuestionContext::Conversation { entity1, entity2, .. })) => {
            let mut block = ctx.context_lines();
            block.extend(role_tagged(ctx.prior_turns()));
            block.push(format!("User: {question}"));
            fill(
                CLAQUA_MULTI_DETECT,
                &[
                    ("context", &block.join("\n")),
                    ("question", question),
                    ("entity1", entity1),
                    ("entity2", entity2),
                ],
            )
        }
        (DatasetKind::ClaquaMulti, _) => {
            return Err(PromptError::MissingContext {
                dataset,
                needed: "conversation",
            })
        }
    };
    Ok(PromptText {
        text,
        step: PromptStep::Detect,
        dataset: Some(dataset),
    })
}

/// `User:`/`Bot:` lines for alternating prior turns, user first.
fn role_tagged(turns: &[String]) -> impl Iterator<Item = String> + '_ {
    turns.iter().enumerate().map(|(i, t)| {
        let tag = if i % 2 == 0 { "User" } else { "Bot" };
        format!("{tag}: {}", escape_turn(t))
    })
}

/// Prompt that asks the model for a clarifying question about `question`.
pub fn render_clarify(
    question: &str,
    dataset: DatasetKind,
    prior_dialogue: Option<&[String]>,
) -> Result<PromptText, PromptError> {
    non_empty(question, "question")?;
    let text = match dataset {
        DatasetKind::AmbigTrivia => fill(AMBIG_TRIVIA_CLARIFY, &[("question", question)]),
        DatasetKind::ClaquaSingle => fill(CLAQUA_SINGLE_CLARIFY, &[("question", question)]),
        DatasetKind::ClaquaMulti => {
            let mut block: String = prior_dialogue
                .unwrap_or_default()
                .iter()
                .map(|t| format!("{t} <EOS>\n"))
                .collect();
            block.push_str(question);
            fill(CLAQUA_MULTI_CLARIFY, &[("question", &block)])
        }
        DatasetKind::ClariQ => {
            return Err(PromptError::Unsupported {
                dataset,
                step: PromptStep::Clarify,
            })
        }
    };
    Ok(PromptText {
        text,
        step: PromptStep::Clarify,
        dataset: Some(dataset),
    })
}

/// Which instruction line opens an answer prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AnswerHeader {
    #[default]
    Plain,
    /// Also tells the bot it may ask for clarification.
    InviteClarification,
}

/// Conversation transcript prompt ending with the cue for the bot's next turn.
pub fn render_answer(dialogue: &[DialogueTurn]) -> Result<PromptText, PromptError> {
    render_answer_with(dialogue, AnswerHeader::Plain, None)
}

pub fn render_answer_with(
    dialogue: &[DialogueTurn],
    header: AnswerHeader,
    context: Option<&QuestionContext>,
) -> Result<PromptText, PromptError> {
    match dialogue.first() {
        None => return Err(PromptError::Empty("dialogue")),
        Some(first) if first.role != Role::User => return Err(PromptError::BadDialogue),
        Some(_) => {}
    }
    let mut lines = vec![match header {
        AnswerHeader::Plain => ANSWER_HEADER.to_string(),
        AnswerHeader::InviteClarification => PROMPTING_BASELINE_HEADER.to_string(),
    }];
    if let Some(ctx) = context {
        lines.extend(ctx.context_lines());
        lines.extend(role_tagged(ctx.prior_turns()));
    }
    for turn in dialogue {
        let tag = match turn.role {
            Role::User => "User",
            Role::Assistant => "Bot",
        };
        lines.push(format!("{tag}: {}", escape_turn(&turn.text)));
    }
    lines.push("Bot:".to_string());
    Ok(PromptText {
        text: lines.join("\n"),
        step: PromptStep::Answer,
        dataset: None,
    })
}

/// Keeps each turn on one line so the role-tagged transcript stays
/// unambiguous: backslashes are doubled and line breaks written as `\n`/`\r`.
fn escape_turn(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

/// Prompt for the simulated user: answer `clarifying_question` as someone
/// who meant `intended` when asking `ambiguous`.
pub fn render_oracle(clarifying_question: &str, intended: &str, ambiguous: &str) -> Result<PromptText, PromptError> {
    render_oracle_inner(clarifying_question, intended, ambiguous, "")
}

/// Same as [`render_oracle`] with [`ORACLE_GUARD_INSTRUCTION`] added before the cue.
pub fn render_oracle_guarded(
    clarifying_question: &str,
    intended: &str,
    ambiguous: &str,
) -> Result<PromptText, PromptError> {
    render_oracle_inner(clarifying_question, intended, ambiguous, ORACLE_GUARD_INSTRUCTION)
}

fn render_oracle_inner(
    clarifying: &str,
    intended: &str,
    ambiguous: &str,
    extra: &str,
) -> Result<PromptText, PromptError> {
    non_empty(clarifying, "clarifying question")?;
    non_empty(intended, "intended question")?;
    non_empty(ambiguous, "ambiguous question")?;
    let text = fill(
        ORACLE,
        &[
            ("ambiguous", ambiguous),
            ("intended", intended),
            ("clarifying", clarifying),
            ("extra", extra),
        ],
    );
    Ok(PromptText {
        text,
        step: PromptStep::Oracle,
        dataset: None,
    })
}

/// SHA-256 over every template file, hex encoded. Changes whenever any
/// prompt text changes.
pub fn prompt_version() -> String {
    let mut hasher = Sha256::new();
    for (name, body) in TEMPLATES {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        hasher.update(body.as_bytes());
        hasher.update([0u8]);
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
