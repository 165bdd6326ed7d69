//! One episode per policy on an ambiguous question, with a fixed
//! clarification standing in for the user.
//!
//! cargo run --example clarify_dialogue

use clam::lm::Matcher;
use clam::pipeline::EpisodeInput;
use clam::{run_episode, DatasetKind, FixedClarification, PipelineConfig, Policy, ScriptRule, ScriptedBackend};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let q = "On what date did he land on the moon?";
    let backend = ScriptedBackend::new(vec![
        ScriptRule::true_false(Matcher::Contains("This question is ambiguous:".into()), -0.05),
        ScriptRule::contains("the following clarifying question:", "\nWho is he?"),
        ScriptRule::contains("User: Alan Bean\nBot:", " November 19, 1969."),
        ScriptRule::contains("imprecise.", " Who do you mean?"),
        ScriptRule::contains("Bot:", " July 20, 1969."),
    ])?;
    let user = FixedClarification::new("Alan Bean");
    let input = EpisodeInput::new("moon", q, DatasetKind::AmbigTrivia);
    for policy in Policy::ALL {
        let t = run_episode(&input, policy, &backend, Some(&user), &PipelineConfig::default())?;
        println!("== {policy}");
        for turn in &t.turns {
            println!("  {:<20} {}", format!("{:?}", turn.kind), turn.text);
        }
    }
    Ok(())
}
