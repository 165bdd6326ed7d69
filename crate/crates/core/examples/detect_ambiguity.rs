//! Scores two questions with a scripted backend and routes them at τ = -0.3.
//!
//! cargo run --example detect_ambiguity

use clam::lm::Matcher;
use clam::{ambiguity_score, classify, ClassifierConfig, DatasetKind, ScriptRule, ScriptedBackend};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let backend = ScriptedBackend::new(vec![
        ScriptRule::true_false(Matcher::Contains("Q: When did he land on the moon?\n".into()), -0.05),
        ScriptRule::true_false(
            Matcher::Contains("Q: When did Alan Bean land on the moon?\n".into()),
            -2.3,
        ),
    ])?;
    let config = ClassifierConfig::default();
    for (id, q) in [
        ("ambiguous", "When did he land on the moon?"),
        ("specific", "When did Alan Bean land on the moon?"),
    ] {
        let score = ambiguity_score(id, q, None, DatasetKind::AmbigTrivia, &backend, &config)?;
        println!(
            "{q:<40} logprob({:?}) = {:>6.2}  -> {:?}",
            score.matched_variant,
            score.logprob_true,
            classify(&score, &config)
        );
    }
    Ok(())
}
