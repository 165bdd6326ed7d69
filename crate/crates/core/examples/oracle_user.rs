//! The simulated user: it sees the unambiguous twin of the question and
//! answers the clarifying question without revealing the answer.
//!
//! cargo run --example oracle_user

use clam::{ClarificationSource, Oracle, ScriptRule, ScriptedBackend};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // The first reply gives the answer away, so the oracle retries with a
    // stricter instruction.
    let backend = ScriptedBackend::new(vec![
        ScriptRule::contains("Do not answer the original question.", " Alan Bean"),
        ScriptRule::contains("Provide only", " Alan Bean, who landed on November 19, 1969"),
    ])?;
    let oracle = Oracle::new(
        &backend,
        "On what date did Alan Bean land on the moon?",
        vec!["November 19, 1969".into()],
    )?;
    let reply = oracle.provide_clarification("Who is he?", "On what date did he land on the moon?")?;
    println!("clarification: {reply:?} after {} model calls", backend.call_count());

    // Privileged text that already holds the answer is refused up front.
    let err = Oracle::new(&backend, "Was it November 19, 1969?", vec!["November 19, 1969".into()]).err();
    println!(
        "leaky privileged text: {}",
        err.map_or("accepted".into(), |e| e.to_string())
    );
    Ok(())
}
