//! Scores one question against a live OpenAI-compatible completions
//! endpoint. Needs `CLAM_API_KEY`; `CLAM_API_BASE` and `CLAM_MODEL` are
//! optional.
//!
//! CLAM_API_KEY=... cargo run --example live_openai -- "Who won the match?"

use clam::lm::OpenAiCompletions;
use clam::runner::{DEFAULT_MODEL, MODEL_ENV};
use clam::{ambiguity_score, classify, ClassifierConfig, DatasetKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let question = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "When did he land on the moon?".into());
    let model = std::env::var(MODEL_ENV).unwrap_or_else(|_| DEFAULT_MODEL.into());
    let backend = match OpenAiCompletions::from_env(&model) {
        Ok(b) => b,
        Err(e) => {
            eprintln!("skipping: {e}");
            return Ok(());
        }
    };
    let config = ClassifierConfig::default();
    let score = ambiguity_score("cli", &question, None, DatasetKind::AmbigTrivia, &backend, &config)?;
    println!(
        "{model}: logprob({:?}) = {:.3} -> {:?}",
        score.matched_variant,
        score.logprob_true,
        classify(&score, &config)
    );
    Ok(())
}
