//! Loads each bundled corpus and shows how it splits into evaluation items.
//!
//! cargo run --example validate_corpus

use std::path::PathBuf;

use clam::corpus::{capabilities, load_claqua, load_clariq, load_pairs, subsample, ClaquaVariant, SAMPLER};
use clam::DatasetKind;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data");

    let pairs = load_pairs(data.join("ambig_trivia_sample.jsonl"))?;
    println!("ambig_trivia: {} pairs", pairs.len());
    let picked = subsample(&pairs, 5, 42)?;
    let ids: Vec<&str> = picked.iter().map(|p| p.id.as_str()).collect();
    println!("  5 pairs via {SAMPLER}, seed 42: {ids:?}");

    let clariq = load_clariq(data.join("clariq_sample.tsv"))?;
    let needs: Vec<String> = clariq
        .iter()
        .map(|q| {
            format!(
                "{}->{}",
                q.clarification_need.unwrap_or(0),
                if q.ambiguous { "A" } else { "U" }
            )
        })
        .collect();
    println!("clariq: {} queries, need->label {}", clariq.len(), needs.join(" "));

    let single = load_claqua(data.join("claqua_single_sample.jsonl"), ClaquaVariant::Single)?;
    let multi = load_claqua(data.join("claqua_multi_sample.jsonl"), ClaquaVariant::Multi)?;
    println!("claqua: {} single-turn, {} multi-turn", single.len(), multi.len());

    for kind in DatasetKind::ALL {
        println!("  {:<14} {:?}", kind.as_str(), capabilities(kind));
    }
    Ok(())
}
