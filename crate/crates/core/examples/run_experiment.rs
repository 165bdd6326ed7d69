//! Runs every policy over the bundled 20-pair corpus with the scripted
//! fixture backend, then writes the report tables.
//!
//! cargo run --example run_experiment [out_dir]

use std::path::PathBuf;

use clam::runner::{report, run_experiment, BackendSpec, DatasetSpec, RunConfig};
use clam::DatasetKind;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let out = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("clam-example-run"), PathBuf::from);
    let _ = std::fs::remove_dir_all(&out);
    let config = RunConfig::new(
        DatasetSpec {
            path: root.join("data/ambig_trivia_sample.jsonl"),
            kind: DatasetKind::AmbigTrivia,
        },
        BackendSpec::Scripted {
            path: root.join("data/fixtures/sample_backend.json"),
        },
        &out,
    );
    let run = run_experiment(&config)?;
    for p in &run.metrics.policies {
        if let Some(r) = &p.report {
            println!(
                "{:<20} accuracy {:>6.2}%  adjusted {:>6.2}%  asked on {}/{} unambiguous",
                p.policy.as_str(),
                100.0 * r.accuracy,
                100.0 * r.adjusted_accuracy,
                r.routing.unambiguous_asked,
                r.unambiguous_n
            );
        }
    }
    for path in report(&out)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}
