//! Question corpora: file formats, validation and seeded subsampling.
//!
//! * Ambiguous/unambiguous question pairs: JSONL, one pair per line.
//! * ClariQ: TSV with at least `initial_request` and `clarification_need`.
//! * CLAQUA: JSONL with a `variant` field of `single` or `multi`.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::prompts::{DatasetKind, QuestionContext};

/// Name of the subsampling algorithm, recorded in run metadata.
pub const SAMPLER: &str = "chacha8/selection-sampling";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: malformed JSON: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("line {line}{}: {reason}", id.as_deref().map(|i| format!(" (id {i:?})")).unwrap_or_default())]
    Invalid {
        line: usize,
        id: Option<String>,
        reason: String,
    },
    #[error("TSV: {0}")]
    Tsv(#[from] csv::Error),
    #[error("TSV is missing required column {0:?}")]
    MissingColumn(&'static str),
    #[error("cannot sample {requested} items from {available}")]
    SampleTooLarge { requested: usize, available: usize },
}

fn invalid(line: usize, id: Option<&str>, reason: impl Into<String>) -> CorpusError {
    CorpusError::Invalid {
        line,
        id: id.map(str::to_string),
        reason: reason.into(),
    }
}

fn read(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    PronounSubstitution,
    ClassGeneralization,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionPair {
    pub id: String,
    pub ambiguous: String,
    pub unambiguous: String,
    pub answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<TransformKind>,
}

impl QuestionPair {
    pub fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("id is empty".into());
        }
        if self.ambiguous.trim().is_empty() || self.unambiguous.trim().is_empty() {
            return Err("question text is empty".into());
        }
        if self.ambiguous == self.unambiguous {
            return Err("ambiguous and unambiguous questions are identical".into());
        }
        if self.answers.is_empty() || self.answers.iter().any(|a| a.trim().is_empty()) {
            return Err("needs at least one non-empty reference answer".into());
        }
        Ok(())
    }
}

pub fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<QuestionPair>, CorpusError> {
    parse_pairs(&read(path.as_ref())?)
}

/// Parses pair JSONL. Blank lines are skipped; errors carry 1-based line numbers.
pub fn parse_pairs(text: &str) -> Result<Vec<QuestionPair>, CorpusError> {
    let mut seen = HashSet::new();
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let pair: QuestionPair = serde_json::from_str(raw).map_err(|source| CorpusError::Json { line, source })?;
        pair.validate().map_err(|r| invalid(line, Some(&pair.id), r))?;
        if !seen.insert(pair.id.clone()) {
            return Err(invalid(line, Some(&pair.id), "duplicate id"));
        }
        pairs.push(pair);
    }
    Ok(pairs)
}

pub fn write_pairs(pairs: &[QuestionPair]) -> String {
    pairs
        .iter()
        .map(|p| serde_json::to_string(p).expect("pairs serialize") + "\n")
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledQuestion {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<QuestionContext>,
    pub ambiguous: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clarification_need: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answers: Option<Vec<String>>,
    /// Label naming the entity the asker meant, shown only to the oracle.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intended: Option<String>,
    pub dataset: DatasetKind,
}

/// ClariQ need levels 3 and 4 count as ambiguous, 1 and 2 as not.
pub fn binarize_need(need: u8) -> Result<bool, String> {
    match need {
        1 | 2 => Ok(false),
        3 | 4 => Ok(true),
        other => Err(format!("clarification_need {other} is outside 1..=4")),
    }
}

pub fn load_clariq(path: impl AsRef<Path>) -> Result<Vec<LabeledQuestion>, CorpusError> {
    parse_clariq(read(path.as_ref())?.as_bytes())
}

/// Reads ClariQ TSV. Rows sharing a `topic_id` (one per facet upstream) are
/// collapsed to the first; their needs must agree.
pub fn parse_clariq(data: impl std::io::Read) -> Result<Vec<LabeledQuestion>, CorpusError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .from_reader(data);
    let headers = reader.headers()?.clone();
    let col = |name: &'static str| headers.iter().position(|h| h == name);
    let text_col = col("initial_request").ok_or(CorpusError::MissingColumn("initial_request"))?;
    let need_col = col("clarification_need").ok_or(CorpusError::MissingColumn("clarification_need"))?;
    let id_col = col("topic_id");

    let mut out: Vec<LabeledQuestion> = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let id = match id_col {
            Some(c) => row.get(c).unwrap_or_default().trim().to_string(),
            None => format!("row{line}"),
        };
        let text = row.get(text_col).unwrap_or_default().trim().to_string();
        if text.is_empty() {
            return Err(invalid(line, Some(&id), "initial_request is empty"));
        }
        let need: u8 = row
            .get(need_col)
            .unwrap_or_default()
            .trim()
            .parse()
            .map_err(|_| invalid(line, Some(&id), "clarification_need is not an integer"))?;
        let ambiguous = binarize_need(need).map_err(|r| invalid(line, Some(&id), r))?;
        if let Some(prev) = out.iter().find(|q| q.id == id) {
            if prev.clarification_need != Some(need) || prev.text != text {
                return Err(invalid(line, Some(&id), "conflicting rows for the same topic"));
            }
            continue;
        }
        out.push(LabeledQuestion {
            id,
            text,
            context: None,
            ambiguous,
            clarification_need: Some(need),
            answers: None,
            intended: None,
            dataset: DatasetKind::ClariQ,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClaquaVariant {
    Single,
    Multi,
}

impl ClaquaVariant {
    pub fn dataset(self) -> DatasetKind {
        match self {
            ClaquaVariant::Single => DatasetKind::ClaquaSingle,
            ClaquaVariant::Multi => DatasetKind::ClaquaMulti,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClaquaRow {
    id: String,
    variant: ClaquaVariant,
    question: String,
    ambiguous: bool,
    #[serde(default)]
    entity_name: Option<String>,
    #[serde(default)]
    entity1: Option<String>,
    #[serde(default)]
    entity2: Option<String>,
    #[serde(default)]
    entity1_description: Option<String>,
    #[serde(default)]
    entity2_description: Option<String>,
    #[serde(default)]
    prior_turns: Vec<String>,
    #[serde(default)]
    intended: Option<String>,
    #[serde(default)]
    answers: Option<Vec<String>>,
}

pub fn load_claqua(path: impl AsRef<Path>, variant: ClaquaVariant) -> Result<Vec<LabeledQuestion>, CorpusError> {
    parse_claqua(&read(path.as_ref())?, variant)
}

pub fn parse_claqua(text: &str, variant: ClaquaVariant) -> Result<Vec<LabeledQuestion>, CorpusError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let row: ClaquaRow = serde_json::from_str(raw).map_err(|source| CorpusError::Json { line, source })?;
        let id = row.id.clone();
        let bad = |reason: &str| invalid(line, Some(&id), reason);
        if row.variant != variant {
            return Err(bad("variant does not match the requested CLAQUA variant"));
        }
        if row.question.trim().is_empty() {
            return Err(bad("question is empty"));
        }
        let need = |v: Option<String>, what: &str| {
            v.filter(|s| !s.trim().is_empty())
                .ok_or_else(|| bad(&format!("missing {what}")))
        };
        let context = match variant {
            ClaquaVariant::Single => QuestionContext::Entities {
                entity_name: need(row.entity_name, "entity_name")?,
                entity1: need(row.entity1, "entity1 description")?,
                entity2: need(row.entity2, "entity2 description")?,
            },
            ClaquaVariant::Multi => {
                if row.prior_turns.is_empty() {
                    return Err(bad("missing prior_turns"));
                }
                QuestionContext::Conversation {
                    entity1: need(row.entity1, "entity1")?,
                    entity2: need(row.entity2, "entity2")?,
                    entity1_description: need(row.entity1_description, "entity1_description")?,
                    entity2_description: need(row.entity2_description, "entity2_description")?,
                    prior_turns: row.prior_turns,
                }
            }
        };
        if row.ambiguous && row.intended.as_deref().is_none_or(|s| s.trim().is_empty()) {
            return Err(bad("ambiguous item lacks the intended-entity label"));
        }
        if row.answers.as_ref().is_some_and(|a| a.is_empty()) {
            return Err(bad("answers is present but empty"));
        }
        if !seen.insert(id.clone()) {
            return Err(bad("duplicate id"));
        }
        out.push(LabeledQuestion {
            id,
            text: row.question,
            context: Some(context),
            ambiguous: row.ambiguous,
            clarification_need: None,
            answers: row.answers,
            intended: row.intended,
            dataset: variant.dataset(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    Detect,
    Clarify,
    FinalAccuracyAmbiguous,
    FinalAccuracyUnambiguous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub detect: bool,
    pub clarify: bool,
    pub final_accuracy_ambiguous: bool,
    pub final_accuracy_unambiguous: bool,
}

impl Capabilities {
    pub fn supports(&self, c: Capability) -> bool {
        match c {
            Capability::Detect => self.detect,
            Capability::Clarify => self.clarify,
            Capability::FinalAccuracyAmbiguous => self.final_accuracy_ambiguous,
            Capability::FinalAccuracyUnambiguous => self.final_accuracy_unambiguous,
        }
    }
}

/// Which evaluation steps each dataset can support.
pub fn capabilities(dataset: DatasetKind) -> Capabilities {
    let all = |d, c, a, u| Capabilities {
        detect: d,
        clarify: c,
        final_accuracy_ambiguous: a,
        final_accuracy_unambiguous: u,
    };
    match dataset {
        DatasetKind::AmbigTrivia => all(true, true, true, true),
        DatasetKind::ClariQ => all(true, false, false, false),
        DatasetKind::ClaquaSingle | DatasetKind::ClaquaMulti => all(true, true, true, false),
    }
}

/// Uniform sample of `n` items without replacement, in input order.
///
/// Selection sampling: item `i` is kept with probability
/// `needed / remaining`, using one ChaCha8 draw per item examined.
pub fn subsample<T: Clone>(items: &[T], n: usize, seed: u64) -> Result<Vec<T>, CorpusError> {
    if n > items.len() {
        return Err(CorpusError::SampleTooLarge {
            requested: n,
            available: items.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for (i, item) in items.iter().enumerate() {
        let needed = n - out.len();
        if needed == 0 {
            break;
        }
        let remaining = items.len() - i;
        let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        if (remaining as f64) * u < needed as f64 {
            out.push(item.clone());
        }
    }
    Ok(out)
}

/// One question as the runner sees it, whatever corpus it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<QuestionContext>,
    pub dataset: DatasetKind,
    pub true_ambiguous: bool,
    #[serde(default)]
    pub answers: Vec<String>,
    /// Privileged text for the simulated user.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intended: Option<String>,
}

/// Each pair becomes two items, `<id>/ambiguous` and `<id>/unambiguous`.
/// Both give the oracle the unambiguous question as privileged text.
pub fn items_from_pairs(pairs: &[QuestionPair]) -> Vec<EvalItem> {
    pairs
        .iter()
        .flat_map(|p| {
            [
                (true, &p.ambiguous, "ambiguous"),
                (false, &p.unambiguous, "unambiguous"),
            ]
            .map(|(amb, question, suffix)| EvalItem {
                id: format!("{}/{suffix}", p.id),
                question: question.clone(),
                context: None,
                dataset: DatasetKind::AmbigTrivia,
                true_ambiguous: amb,
                answers: p.answers.clone(),
                intended: Some(p.unambiguous.clone()),
            })
        })
        .collect()
}

/// The oracle sees `"<question> (meaning <label>)"` for CLAQUA items; items
/// without a label give the question itself.
pub fn items_from_labeled(questions: &[LabeledQuestion]) -> Vec<EvalItem> {
    questions
        .iter()
        .map(|q| EvalItem {
            id: q.id.clone(),
            question: q.text.clone(),
            context: q.context.clone(),
            dataset: q.dataset,
            true_ambiguous: q.ambiguous,
            answers: q.answers.clone().unwrap_or_default(),
            intended: match q.dataset {
                DatasetKind::ClariQ => None,
                _ => Some(match &q.intended {
                    Some(label) => format!("{} (meaning {label})", q.text),
                    None => q.text.clone(),
                }),
            },
        })
        .collect()
}
