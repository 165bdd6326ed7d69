//! Accuracy, adjusted accuracy over λ, and AUROC on a handful of records.
//!
//! cargo run --example metrics_auroc

use clam::metrics::{lambda_sweep, lambda_sweep_csv, Normalization};
use clam::{aggregate, auroc, EvalRecord, MetricsConfig, Policy};

fn record(id: &str, ambiguous: bool, score: f64, asked: bool, correct: bool) -> EvalRecord {
    EvalRecord {
        question_id: id.into(),
        policy: Policy::Clam,
        true_ambiguous: ambiguous,
        score: Some(score),
        asked_clarification: asked,
        correct,
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let records = vec![
        record("a1", true, -0.05, true, true),
        record("a2", true, -0.20, true, true),
        record("a3", true, -0.90, false, false),
        record("u1", false, -0.25, true, true),
        record("u2", false, -1.50, false, true),
        record("u3", false, -0.90, false, true),
    ];
    let report = aggregate(&records, &MetricsConfig::default())?;
    println!("{}", serde_json::to_string_pretty(&report)?);

    let scores: Vec<(f64, bool)> = records.iter().map(|r| (r.score.unwrap(), r.true_ambiguous)).collect();
    println!("AUROC with one tie: {:.4}", auroc(&scores)?);

    let lambdas = [0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
    let rows = lambda_sweep(&[(Policy::Clam, records)], &lambdas, Normalization::default())?;
    print!("{}", lambda_sweep_csv(&lambdas, &rows));
    Ok(())
}
