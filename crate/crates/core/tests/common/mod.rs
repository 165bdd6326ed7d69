#![allow(dead_code)]

use std::path::{Path, PathBuf};

use clam::prompts::{render_clarify, render_detect};
use clam::{DatasetKind, QuestionContext};

pub fn crate_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(rel)
}

pub fn sample_corpus() -> PathBuf {
    crate_path("data/ambig_trivia_sample.jsonl")
}

pub fn sample_backend() -> PathBuf {
    crate_path("data/fixtures/sample_backend.json")
}

/// (file name, rendered text) for every frozen prompt.
pub fn golden_prompts() -> Vec<(String, String)> {
    let entities = QuestionContext::Entities {
        entity_name: "Mercury".into(),
        entity1: "Mercury Mercury is the smallest planet in the Solar System. (...)".into(),
        entity2: "Mercury Mercury is a chemical element with the symbol Hg. (...)".into(),
    };
    let conversation = QuestionContext::Conversation {
        entity1: "Dune".into(),
        entity2: "Dune Messiah".into(),
        entity1_description: "Dune. Dune is a 1965 science fiction novel (...)".into(),
        entity2_description: "Dune Messiah. Dune Messiah is a 1969 science fiction novel (...)".into(),
        prior_turns: vec!["What is the sequel of dune".into(), "Dune Messiah".into()],
    };
    let prior = ["What is the sequel of dune".to_string(), "Dune Messiah".to_string()];
    let cases: Vec<(DatasetKind, &str, Option<&QuestionContext>)> = vec![
        (DatasetKind::AmbigTrivia, "When did he land on the moon?", None),
        (DatasetKind::ClariQ, "Tell me about the Kiwi.", None),
        (DatasetKind::ClaquaSingle, "Who discovered Mercury?", Some(&entities)),
        (
            DatasetKind::ClaquaMulti,
            "Who is the author of it?",
            Some(&conversation),
        ),
    ];
    let mut out = Vec::new();
    for (kind, question, ctx) in cases {
        let detect = render_detect(question, ctx, kind).unwrap();
        out.push((format!("{kind}.detect.txt"), detect.text));
        if kind != DatasetKind::ClariQ {
            let prior = (kind == DatasetKind::ClaquaMulti).then_some(&prior[..]);
            let clarify = render_clarify(question, kind, prior).unwrap();
            out.push((format!("{kind}.clarify.txt"), clarify.text));
        }
    }
    out
}

/// Names of goldens that differ from the rendered text. With `CLAM_BLESS=1`
/// the files are rewritten instead.
pub fn golden_mismatches() -> Vec<String> {
    let dir = crate_path("prompts/golden");
    let bless = std::env::var("CLAM_BLESS").is_ok_and(|v| v == "1");
    let mut bad = Vec::new();
    for (name, text) in golden_prompts() {
        let path = dir.join(&name);
        if bless {
            std::fs::create_dir_all(&dir).unwrap();
            std::fs::write(&path, &text).unwrap();
            continue;
        }
        match std::fs::read(&path) {
            Ok(bytes) if bytes == text.as_bytes() => {}
            _ => bad.push(name),
        }
    }
    bad
}
