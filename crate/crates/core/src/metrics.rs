//! Answer correctness, adjusted accuracy and AUROC.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::pipeline::Policy;

pub const DEFAULT_LAMBDA: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("no records to aggregate")]
    Empty,
    #[error("lambda must lie in (0, 1], got {0}")]
    Lambda(f64),
    #[error(transparent)]
    Auroc(#[from] AurocError),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AurocError {
    #[error("AUROC is undefined with {positives} positive and {negatives} negative items")]
    OneClass { positives: u64, negatives: u64 },
    #[error("score {0} is not a finite number")]
    NonFinite(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Normalization {
    pub lowercase: bool,
    pub strip_punctuation: bool,
    pub collapse_whitespace: bool,
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            lowercase: true,
            strip_punctuation: true,
            collapse_whitespace: true,
        }
    }
}

pub fn normalize(text: &str, n: &Normalization) -> String {
    let mut s: String = if n.strip_punctuation {
        text.chars().filter(|c| !c.is_ascii_punctuation()).collect()
    } else {
        text.to_string()
    };
    if n.lowercase {
        s = s.to_lowercase();
    }
    if n.collapse_whitespace {
        s = s.split_whitespace().collect::<Vec<_>>().join(" ");
    }
    s
}

/// The first reference answer found in `text` after normalizing both sides.
/// References that normalize to nothing never match.
pub fn contained_answer<'r>(text: &str, references: &'r [String], n: &Normalization) -> Option<&'r str> {
    let haystack = normalize(text, n);
    references.iter().map(String::as_str).find(|r| {
        let needle = normalize(r, n);
        !needle.is_empty() && haystack.contains(&needle)
    })
}

pub fn contains_accuracy(answer: &str, references: &[String], n: &Normalization) -> bool {
    contained_answer(answer, references, n).is_some()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub lambda: f64,
    pub normalization: Normalization,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            normalization: Normalization::default(),
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<(), MetricsError> {
        check_lambda(self.lambda)
    }
}

fn check_lambda(lambda: f64) -> Result<(), MetricsError> {
    if lambda > 0.0 && lambda <= 1.0 {
        Ok(())
    } else {
        Err(MetricsError::Lambda(lambda))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub question_id: String,
    pub policy: Policy,
    pub true_ambiguous: bool,
    /// Continuous ambiguity score, present for policies that compute one.
    pub score: Option<f64>,
    pub asked_clarification: bool,
    pub correct: bool,
}

impl EvalRecord {
    pub fn penalized(&self) -> bool {
        !self.true_ambiguous && self.asked_clarification
    }
}

pub fn adjusted_score(record: &EvalRecord, lambda: f64) -> f64 {
    let base = if record.correct { 1.0 } else { 0.0 };
    if record.penalized() {
        base * lambda
    } else {
        base
    }
}

/// Pairwise comparison counts behind an AUROC value. `twice_u` counts each
/// positive-above-negative pair as 2 and each tie as 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AurocCounts {
    pub twice_u: u128,
    pub positives: u64,
    pub negatives: u64,
}

impl AurocCounts {
    pub fn value(&self) -> f64 {
        self.twice_u as f64 / (2.0 * self.positives as f64 * self.negatives as f64)
    }
}

/// Exact Mann-Whitney counts in O(n log n).
pub fn auroc_counts(items: &[(f64, bool)]) -> Result<AurocCounts, AurocError> {
    if let Some(&(s, _)) = items.iter().find(|(s, _)| !s.is_finite()) {
        return Err(AurocError::NonFinite(s));
    }
    let positives = items.iter().filter(|(_, p)| *p).count() as u64;
    let negatives = items.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(AurocError::OneClass { positives, negatives });
    }
    let mut sorted = items.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut twice_u: u128 = 0;
    let mut negatives_below: u128 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        let (mut p, mut n) = (0u128, 0u128);
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            if sorted[j].1 {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        twice_u += p * (2 * negatives_below + n);
        negatives_below += n;
        i = j;
    }
    Ok(AurocCounts {
        twice_u,
        positives,
        negatives,
    })
}

/// Probability that a random positive scores above a random negative, ties
/// counting one half.
pub fn auroc(items: &[(f64, bool)]) -> Result<f64, AurocError> {
    auroc_counts(items).map(|c| c.value())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predictor {
    Score,
    AskedClarification,
}

/// Records split by true label and by whether the system asked.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingCounts {
    pub ambiguous_asked: u64,
    pub ambiguous_direct: u64,
    pub unambiguous_asked: u64,
    pub unambiguous_direct: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: u64,
    pub correct: u64,
    /// Correct answers on unambiguous items where the system asked anyway.
    pub correct_penalized: u64,
    pub lambda: f64,
    pub accuracy: f64,
    pub adjusted_accuracy: f64,
    pub auroc: Option<f64>,
    pub auroc_predictor: Predictor,
    pub routing: RoutingCounts,
    pub ambiguous_n: u64,
    pub ambiguous_correct: u64,
    pub ambiguous_accuracy: Option<f64>,
    pub unambiguous_n: u64,
    pub unambiguous_correct: u64,
    pub unambiguous_accuracy: Option<f64>,
}

pub fn aggregate(records: &[EvalRecord], config: &MetricsConfig) -> Result<MetricsReport, MetricsError> {
    config.validate()?;
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = records.len() as u64;
    let count = |f: &dyn Fn(&EvalRecord) -> bool| records.iter().filter(|r| f(r)).count() as u64;

    let correct = count(&|r| r.correct);
    let correct_penalized = count(&|r| r.correct && r.penalized());
    let adjusted_sum: f64 = records.iter().map(|r| adjusted_score(r, config.lambda)).sum();

    let routing = RoutingCounts {
        ambiguous_asked: count(&|r| r.true_ambiguous && r.asked_clarification),
        ambiguous_direct: count(&|r| r.true_ambiguous && !r.asked_clarification),
        unambiguous_asked: count(&|r| !r.true_ambiguous && r.asked_clarification),
        unambiguous_direct: count(&|r| !r.true_ambiguous && !r.asked_clarification),
    };

    let (predictor, items): (Predictor, Vec<(f64, bool)>) = if records.iter().all(|r| r.score.is_some()) {
        (
            Predictor::Score,
            records
                .iter()
                .map(|r| (r.score.unwrap_or_default(), r.true_ambiguous))
                .collect(),
        )
    } else {
        (
            Predictor::AskedClarification,
            records
                .iter()
                .map(|r| (if r.asked_clarification { 1.0 } else { 0.0 }, r.true_ambiguous))
                .collect(),
        )
    };
    let auroc = match auroc(&items) {
        Ok(v) => Some(v),
        Err(AurocError::OneClass { .. }) => None,
        Err(e) => return Err(e.into()),
    };

    let ambiguous_n = count(&|r| r.true_ambiguous);
    let ambiguous_correct = count(&|r| r.true_ambiguous && r.correct);
    let unambiguous_n = n - ambiguous_n;
    let unambiguous_correct = correct - ambiguous_correct;
    let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);

    Ok(MetricsReport {
        n,
        correct,
        correct_penalized,
        lambda: config.lambda,
        accuracy: correct as f64 / n as f64,
        adjusted_accuracy: adjusted_sum / n as f64,
        auroc,
        auroc_predictor: predictor,
        routing,
        ambiguous_n,
        ambiguous_correct,
        ambiguous_accuracy: ratio(ambiguous_correct, ambiguous_n),
        unambiguous_n,
        unambiguous_correct,
        unambiguous_accuracy: ratio(unambiguous_correct, unambiguous_n),
    })
}

/// One row of a λ sweep: adjusted accuracy per λ for one policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaRow {
    pub policy: Policy,
    pub adjusted: Vec<f64>,
}

pub fn lambda_sweep(
    records_by_policy: &[(Policy, Vec<EvalRecord>)],
    lambdas: &[f64],
    normalization: Normalization,
) -> Result<Vec<LambdaRow>, MetricsError> {
    lambdas.iter().try_for_each(|&l| check_lambda(l))?;
    records_by_policy
        .iter()
        .map(|(policy, records)| {
            let adjusted = lambdas
                .iter()
                .map(|&lambda| {
                    aggregate(records, &MetricsConfig { lambda, normalization }).map(|r| r.adjusted_accuracy)
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(LambdaRow {
                policy: *policy,
                adjusted,
            })
        })
        .collect()
}

/// Policies as rows, λ values as columns, adjusted accuracy in percent with
/// two decimals.
pub fn lambda_sweep_csv(lambdas: &[f64], rows: &[LambdaRow]) -> String {
    let mut out = String::from("policy");
    for l in lambdas {
        let _ = write!(out, ",{l:.1}");
    }
    out.push('\n');
    for row in rows {
        out.push_str(row.policy.as_str());
        for v in &row.adjusted {
            let _ = write!(out, ",{:.2}", v * 100.0);
        }
        out.push('\n');
    }
    out
}
