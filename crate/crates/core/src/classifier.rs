//! Ambiguity scoring: the log-probability that the model's next token after
//! the few-shot detection prompt is the affirmative label.

use serde::{Deserialize, Serialize};

use crate::lm::{CompletionRequest, LanguageModel, LmError};
use crate::prompts::{render_detect, DatasetKind, PromptError, QuestionContext};

/// Threshold tuned on held-out questions; scores above it count as ambiguous.
pub const DEFAULT_TAU: f64 = -0.3;
/// Alternatives requested for the single scored position.
pub const DEFAULT_TOP_K: u32 = 5;

#[derive(Debug, thiserror::Error)]
pub enum ClassifyError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] LmError),
    #[error("score unavailable: none of {variants:?} among the returned alternatives {seen:?}")]
    ScoreUnavailable { variants: Vec<String>, seen: Vec<String> },
    #[error("invalid classifier config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbiguityScore {
    /// Natural-log probability of the affirmative token, always `<= 0`.
    pub logprob_true: f64,
    pub matched_variant: String,
    pub question_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub tau: f64,
    pub affirmative_variants: Vec<String>,
    pub top_k: u32,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            affirmative_variants: vec![" True".into(), "True".into()],
            top_k: DEFAULT_TOP_K,
        }
    }
}

impl ClassifierConfig {
    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn validate(&self) -> Result<(), ClassifyError> {
        if self.affirmative_variants.is_empty() {
            return Err(ClassifyError::Config("affirmative_variants is empty".into()));
        }
        if self.tau.is_nan() {
            return Err(ClassifyError::Config("tau is NaN".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Ambiguous,
    Unambiguous,
}

/// Scores one question. The request asks for a single token with at least
/// `top_k` alternatives; the score is the log-probability of the best-ranked
/// alternative that is one of the affirmative variants.
pub fn ambiguity_score(
    question_id: &str,
    question: &str,
    context: Option<&QuestionContext>,
    dataset: DatasetKind,
    backend: &dyn LanguageModel,
    config: &ClassifierConfig,
) -> Result<AmbiguityScore, ClassifyError> {
    config.validate()?;
    let prompt = render_detect(question, context, dataset)?;
    let top_k = config.top_k.max(config.affirmative_variants.len() as u32).max(1);
    let request = CompletionRequest::new(prompt.text)
        .max_tokens(1)
        .temperature(0.0)
        .logprob_top_k(top_k);
    let completion = backend.complete(&request)?;

    let mut candidates: Vec<(String, f64)> = completion
        .first_token()
        .map(|t| {
            let mut c = t.top_alternatives.clone();
            if !c.iter().any(|(text, _)| *text == t.text) {
                c.push((t.text.clone(), t.logprob));
            }
            c
        })
        .unwrap_or_default();
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1));

    candidates
        .iter()
        .find(|(text, _)| config.affirmative_variants.iter().any(|v| v == text))
        .map(|(text, lp)| AmbiguityScore {
            logprob_true: *lp,
            matched_variant: text.clone(),
            question_id: question_id.to_string(),
        })
        .ok_or_else(|| ClassifyError::ScoreUnavailable {
            variants: config.affirmative_variants.clone(),
            seen: candidates.into_iter().map(|(t, _)| t).collect(),
        })
}

/// Ambiguous iff the score is strictly greater than `tau`.
pub fn classify(score: &AmbiguityScore, config: &ClassifierConfig) -> Decision {
    decide(score.logprob_true, config.tau)
}

pub fn decide(logprob_true: f64, tau: f64) -> Decision {
    if logprob_true > tau {
        Decision::Ambiguous
    } else {
        Decision::Unambiguous
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{Matcher, ScriptRule, ScriptedBackend, ScriptedToken};
    use proptest::prelude::*;

    fn score_with(rule: ScriptRule) -> Result<AmbiguityScore, ClassifyError> {
        let backend = ScriptedBackend::new(vec![rule]).unwrap();
        ambiguity_score(
            "q1",
            "When did he land on the moon?",
            None,
            DatasetKind::AmbigTrivia,
            &backend,
            &ClassifierConfig::default(),
        )
    }

    #[test]
    fn passes_through_fixture_logprob() {
        let rule = ScriptRule::true_false(Matcher::Contains("ambiguous:".into()), -0.05);
        let s = score_with(rule).unwrap();
        assert_eq!(s.logprob_true, -0.05);
        assert_eq!(s.matched_variant, " True");
        assert_eq!(s.question_id, "q1");

        let rule = ScriptRule::true_false(Matcher::Contains("ambiguous:".into()), -2.3);
        assert_eq!(score_with(rule).unwrap().logprob_true, -2.3);
    }

    #[test]
    fn missing_affirmative_variant_is_an_error() {
        let rule =
            ScriptRule::contains("ambiguous:", " Yes")
                .with_logprobs(vec![ScriptedToken::new(" Yes", -0.2)
                    .with_alternatives(vec![(" Yes".into(), -0.2), (" No".into(), -1.7)])]);
        assert!(matches!(score_with(rule), Err(ClassifyError::ScoreUnavailable { .. })));
    }

    #[test]
    fn highest_ranked_variant_wins() {
        let rule = ScriptRule::contains("ambiguous:", "True").with_logprobs(vec![ScriptedToken::new("True", -0.4)
            .with_alternatives(vec![
                ("True".into(), -0.4),
                (" False".into(), -1.5),
                (" True".into(), -2.0),
            ])]);
        let s = score_with(rule).unwrap();
        assert_eq!(s.matched_variant, "True");
        assert_eq!(s.logprob_true, -0.4);
    }

    #[test]
    fn threshold_boundary_is_strict() {
        let s = |lp| AmbiguityScore {
            logprob_true: lp,
            matched_variant: " True".into(),
            question_id: "x".into(),
        };
        let cfg = ClassifierConfig::default();
        assert_eq!(classify(&s(-0.1), &cfg), Decision::Ambiguous);
        assert_eq!(classify(&s(-0.5), &cfg), Decision::Unambiguous);
        assert_eq!(classify(&s(-0.3), &cfg), Decision::Unambiguous);
    }

    #[test]
    fn empty_variants_rejected() {
        let cfg = ClassifierConfig {
            affirmative_variants: vec![],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn scoring_is_bit_identical_across_runs() {
        let backend = ScriptedBackend::new(vec![ScriptRule::true_false(
            Matcher::Contains("ambiguous:".into()),
            -0.123_456_789,
        )])
        .unwrap();
        let cfg = ClassifierConfig::default();
        let a = ambiguity_score("a", "Q?", None, DatasetKind::ClariQ, &backend, &cfg).unwrap();
        let b = ambiguity_score("a", "Q?", None, DatasetKind::ClariQ, &backend, &cfg).unwrap();
        assert_eq!(a.logprob_true.to_bits(), b.logprob_true.to_bits());
    }

    proptest! {
        #[test]
        fn decision_is_monotone(a in -20.0f64..0.0, b in -20.0f64..0.0, tau in -20.0f64..0.0) {
            let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
            if decide(lo, tau) == Decision::Ambiguous {
                prop_assert_eq!(decide(hi, tau), Decision::Ambiguous);
            }
        }

        #[test]
        fn raising_tau_never_adds_ambiguous(scores in prop::collection::vec(-10.0f64..0.0, 0..50),
                                            t1 in -10.0f64..0.0, t2 in -10.0f64..0.0) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let count = |tau| scores.iter().filter(|s| decide(**s, tau) == Decision::Ambiguous).count();
            prop_assert!(count(hi) <= count(lo));
        }
    }
}
