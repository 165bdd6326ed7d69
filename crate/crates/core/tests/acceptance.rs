//! Acceptance checks. Prints one PASS/FAIL/SKIP line per criterion and exits
//! non-zero if any check fails.

mod common;

use std::collections::HashMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use clam::corpus::{load_pairs, parse_clariq};
use clam::lm::{Matcher, Recording};
use clam::metrics::{auroc_counts, normalize, Normalization};
use clam::pipeline::TurnKind;
use clam::runner::{run_experiment, run_experiment_with, BackendSpec, DatasetSpec, RunConfig, Step};
use clam::{
    aggregate, run_episode, ClassifierConfig, DatasetKind, EvalRecord, FixedClarification, MetricsConfig,
    PipelineConfig, Policy, ScriptRule, ScriptedBackend,
};

const AUROC_TOL: f64 = 1e-12;
const ADJUSTED_TOL: f64 = 1e-12;
const AUROC_BUDGET: Duration = Duration::from_secs(5);
const ALGEBRA_BUDGET: Duration = Duration::from_secs(5);
const ROUTING_BUDGET: Duration = Duration::from_secs(10);
const GAP_BUDGET: Duration = Duration::from_secs(10);
const SEED: u64 = 0x5eed;

type Check = Result<String, String>;

enum Status {
    Pass,
    Fail,
    Skip,
}

fn report(name: &str, budget: Option<Duration>, f: impl FnOnce() -> Option<Check>) -> bool {
    let start = Instant::now();
    let outcome = f();
    let took = start.elapsed();
    let (status, detail) = match outcome {
        None => (Status::Skip, "CLAM_API_KEY not set".to_string()),
        Some(Ok(d)) => match budget {
            Some(b) if took > b => (Status::Fail, format!("{d}; took {took:?}, budget {b:?}")),
            _ => (Status::Pass, d),
        },
        Some(Err(d)) => (Status::Fail, d),
    };
    let tag = match status {
        Status::Pass => "PASS",
        Status::Fail => "FAIL",
        Status::Skip => "SKIP",
    };
    println!("{tag} {name}: {detail} [{} ms]", took.as_millis());
    !matches!(status, Status::Fail)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn brute_twice_u(items: &[(f64, bool)]) -> u128 {
    let mut total = 0u128;
    for &(p, _) in items.iter().filter(|i| i.1) {
        for &(n, _) in items.iter().filter(|i| !i.1) {
            total += match p.partial_cmp(&n).unwrap() {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    total
}

fn auroc_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let size = rng.random_range(2..=200);
        let tied = rng.random_bool(0.5);
        let mut items: Vec<(f64, bool)> = (0..size)
            .map(|_| {
                let score = if tied {
                    -(rng.random_range(0..6) as f64) / 2.0
                } else {
                    -rng.random::<f64>() * 5.0
                };
                (score, rng.random_bool(0.5))
            })
            .collect();
        items[0].1 = true;
        items[1].1 = false;
        let expected = brute_twice_u(&items);
        let pos = items.iter().filter(|i| i.1).count() as u128;
        let neg = items.len() as u128 - pos;
        let counts = auroc_counts(&items).map_err(|e| format!("case {case}: {e}"))?;
        ensure(counts.twice_u == expected, || {
            format!("case {case}: twice_u {} != brute {expected}", counts.twice_u)
        })?;
        let value = clam::auroc(&items).map_err(|e| e.to_string())?;
        let err = (value - expected as f64 / (2 * pos * neg) as f64).abs();
        worst = worst.max(err);
        ensure(err <= AUROC_TOL, || format!("case {case}: error {err:e}"))?;
    }
    let constant: Vec<(f64, bool)> = (0..50).map(|i| (-1.25, i % 3 == 0)).collect();
    let c = clam::auroc(&constant).map_err(|e| e.to_string())?;
    ensure(c == 0.5, || format!("constant scores gave {c}"))?;
    Ok(format!(
        "100 instances match the pairwise count, max error {worst:e}; constant input = 0.5"
    ))
}

fn adjusted_algebra() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 1);
    let lambdas: Vec<i64> = (5..=10).collect();
    for set in 0..1000 {
        let n = rng.random_range(1..=120);
        let records: Vec<EvalRecord> = (0..n)
            .map(|i| EvalRecord {
                question_id: format!("q{i}"),
                policy: Policy::Clam,
                true_ambiguous: rng.random_bool(0.5),
                score: None,
                asked_clarification: rng.random_bool(0.5),
                correct: rng.random_bool(0.6),
            })
            .collect();
        let correct = records.iter().filter(|r| r.correct).count() as i64;
        let penalized = records.iter().filter(|r| r.correct && r.penalized()).count() as i64;
        let n = n as i64;
        for &tenths in &lambdas {
            let lambda = Ratio::new(tenths, 10);
            // Per-record definition versus the closed form, both exact.
            let per_record: Ratio<i64> = records
                .iter()
                .map(|r| match (r.correct, r.penalized()) {
                    (false, _) => Ratio::from_integer(0),
                    (true, true) => lambda,
                    (true, false) => Ratio::from_integer(1),
                })
                .sum::<Ratio<i64>>()
                / n;
            let closed = Ratio::new(correct, n) - (Ratio::from_integer(1) - lambda) * Ratio::new(penalized, n);
            ensure(per_record == closed, || {
                format!("set {set}, λ={lambda}: {per_record} != {closed}")
            })?;

            let cfg = MetricsConfig {
                lambda: tenths as f64 / 10.0,
                ..MetricsConfig::default()
            };
            let rep = aggregate(&records, &cfg).map_err(|e| e.to_string())?;
            ensure(
                rep.correct as i64 == correct && rep.correct_penalized as i64 == penalized,
                || format!("set {set}: counts differ"),
            )?;
            let exact = *closed.numer() as f64 / *closed.denom() as f64;
            let err = (rep.adjusted_accuracy - exact).abs();
            ensure(err <= ADJUSTED_TOL, || format!("set {set}, λ={lambda}: error {err:e}"))?;
            if tenths == 10 {
                ensure(rep.adjusted_accuracy == rep.accuracy, || {
                    format!(
                        "set {set}: adjusted(1.0) {} != accuracy {}",
                        rep.adjusted_accuracy, rep.accuracy
                    )
                })?;
            }
        }
    }
    Ok("1000 sets × 6 λ values agree with exact rationals; adjusted(1.0) == accuracy".into())
}

fn shape(kinds: &[TurnKind]) -> Option<bool> {
    use TurnKind::*;
    match kinds {
        [InitialQuestion, DirectAnswer] => Some(false),
        [InitialQuestion, ClarifyingQuestion, Clarification, FinalAnswer] => Some(true),
        _ => None,
    }
}

fn random_backend(rng: &mut ChaCha8Rng, questions: &[String]) -> (ScriptedBackend, Vec<f64>) {
    let mut rules = Vec::new();
    let mut scores = Vec::new();
    for q in questions {
        let lp = match rng.random_range(0..10) {
            0 => -0.3,
            1 => -1e-9,
            _ => -rng.random::<f64>() * 4.0 - 1e-6,
        };
        scores.push(lp);
        rules.push(ScriptRule::true_false(
            Matcher::Contains(format!("Q: {q}\nThis question is ambiguous:")),
            lp,
        ));
    }
    let cq = if rng.random_bool(0.5) {
        " Which one do you mean?"
    } else {
        "\nWho is that?"
    };
    rules.push(ScriptRule::contains("the following clarifying question:", cq));
    rules.push(ScriptRule::contains("Bot:", " Some answer."));
    (ScriptedBackend::new(rules).expect("rules"), scores)
}

fn routing_grammar() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 2);
    let clarifier = FixedClarification::new("The first one.");
    let mut transcripts = 0;
    for backend_no in 0..8 {
        let questions: Vec<String> = (0..30)
            .map(|i| format!("Question {backend_no}-{i} about it?"))
            .collect();
        let (backend, scores) = random_backend(&mut rng, &questions);
        let mut counts: HashMap<String, (usize, usize)> = HashMap::new();
        let runs: [(&str, Policy, f64); 5] = [
            ("clam", Policy::Clam, -0.3),
            ("clam_neg_inf", Policy::Clam, f64::NEG_INFINITY),
            ("clam_zero", Policy::Clam, 0.0),
            ("force", Policy::ForceClarify, -0.3),
            ("default", Policy::DefaultGpt, -0.3),
        ];
        for (label, policy, tau) in runs {
            let config = PipelineConfig {
                classifier: ClassifierConfig::default().with_tau(tau),
                ..PipelineConfig::default()
            };
            let entry = counts.entry(label.to_string()).or_default();
            for (i, q) in questions.iter().enumerate() {
                let input = clam::pipeline::EpisodeInput::new(format!("q{i}"), q.clone(), DatasetKind::AmbigTrivia);
                let t = run_episode(&input, policy, &backend, Some(&clarifier), &config)
                    .map_err(|e| format!("{label}: {e}"))?;
                transcripts += 1;
                let asked = shape(&t.kinds()).ok_or_else(|| format!("{label} q{i}: illegal shape {:?}", t.kinds()))?;
                ensure(asked == t.asked_clarification, || {
                    format!("{label} q{i}: flag disagrees with turns")
                })?;
                if label == "clam" {
                    ensure(asked == (scores[i] > tau), || {
                        format!("q{i}: score {} τ {tau} asked {asked}", scores[i])
                    })?;
                }
                if asked {
                    entry.0 += 1;
                } else {
                    entry.1 += 1;
                }
            }
        }
        ensure(counts["clam_neg_inf"] == counts["force"], || {
            format!("τ=-inf {:?} vs force {:?}", counts["clam_neg_inf"], counts["force"])
        })?;
        ensure(counts["clam_zero"] == counts["default"], || {
            format!("τ=0 {:?} vs default {:?}", counts["clam_zero"], counts["default"])
        })?;
    }
    Ok(format!(
        "{transcripts} transcripts well-formed; Clam asks iff score > τ; τ extremes match baselines"
    ))
}

fn sample_config(out: &std::path::Path, policies: Vec<Policy>) -> RunConfig {
    let mut config = RunConfig::new(
        DatasetSpec {
            path: common::sample_corpus(),
            kind: DatasetKind::AmbigTrivia,
        },
        BackendSpec::Scripted {
            path: common::sample_backend(),
        },
        out,
    );
    config.policies = policies;
    config.seed = 7;
    config
}

fn end_to_end_gap() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    let mut summary = String::new();
    for sub in ["a", "b"] {
        let config = sample_config(&dir.path().join(sub), vec![Policy::DefaultGpt, Policy::Clam]);
        let run = run_experiment(&config).map_err(|e| e.to_string())?;
        ensure(run.failures.is_empty(), || {
            format!("{} failed episodes", run.failures.len())
        })?;
        let get = |p: Policy| {
            run.metrics
                .policy(p)
                .and_then(|m| m.report.clone())
                .ok_or_else(|| format!("no report for {p}"))
        };
        let clam = get(Policy::Clam)?;
        let base = get(Policy::DefaultGpt)?;
        ensure(clam.ambiguous_n == 20 && clam.unambiguous_n == 20, || {
            "expected 20 + 20 items".into()
        })?;
        ensure(clam.ambiguous_accuracy == Some(1.0), || {
            format!("Clam ambiguous {:?}", clam.ambiguous_accuracy)
        })?;
        ensure(base.ambiguous_accuracy == Some(0.0), || {
            format!("DefaultGpt ambiguous {:?}", base.ambiguous_accuracy)
        })?;
        ensure(clam.unambiguous_accuracy == base.unambiguous_accuracy, || {
            format!(
                "unambiguous {:?} vs {:?}",
                clam.unambiguous_accuracy, base.unambiguous_accuracy
            )
        })?;
        summary = format!(
            "Clam ambiguous {:.0}%, DefaultGpt ambiguous {:.0}%, unambiguous both {:.0}%",
            clam.ambiguous_accuracy.unwrap_or_default() * 100.0,
            base.ambiguous_accuracy.unwrap_or_default() * 100.0,
            clam.unambiguous_accuracy.unwrap_or_default() * 100.0
        );
        let records = std::fs::read(config.out_dir.join("records.jsonl")).map_err(|e| e.to_string())?;
        let transcripts = std::fs::read(config.out_dir.join("transcripts.jsonl")).map_err(|e| e.to_string())?;
        outputs.push((records, transcripts));
    }
    ensure(outputs[0] == outputs[1], || "two runs wrote different artifacts".into())?;
    Ok(format!("{summary}; repeat run byte-identical"))
}

fn prompt_goldens() -> Check {
    let bad = common::golden_mismatches();
    ensure(bad.is_empty(), || format!("mismatched: {bad:?}"))?;
    let prompts = common::golden_prompts();
    let has = |needle: &str| prompts.iter().any(|(_, t)| t.contains(needle));
    ensure(has("This question is ambiguous:"), || "detect cue missing".into())?;
    ensure(has("ask the following clarifying question"), || {
        "clarify cue missing".into()
    })?;
    Ok(format!(
        "{} golden files byte-identical across 4 dataset kinds",
        prompts.len()
    ))
}

fn leakage() -> Check {
    let pairs = load_pairs(common::sample_corpus()).map_err(|e| e.to_string())?;
    let norm = Normalization::default();
    let answers: Vec<String> = pairs
        .iter()
        .flat_map(|p| p.answers.iter().map(|a| normalize(a, &norm)))
        .collect();
    let backend = Recording::new(ScriptedBackend::from_json_file(common::sample_backend()).map_err(|e| e.to_string())?);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut config = sample_config(dir.path(), Policy::ALL.to_vec());
    config.steps = vec![Step::Detect, Step::Qa];
    let run = run_experiment_with(&config, &backend).map_err(|e| e.to_string())?;
    let prompts = backend.prompts();
    for prompt in &prompts {
        let p = normalize(prompt, &norm);
        if let Some(a) = answers.iter().find(|a| p.contains(a.as_str())) {
            return Err(format!("prompt contains reference answer {a:?}"));
        }
    }
    let by_pair: HashMap<&str, &Vec<String>> = pairs.iter().map(|p| (p.id.as_str(), &p.answers)).collect();
    let mut clarifications = 0;
    for t in &run.transcripts {
        let pair = t.question_id.split('/').next().unwrap_or_default();
        if let Some(c) = t.clarification() {
            clarifications += 1;
            let refs = by_pair
                .get(pair)
                .ok_or_else(|| format!("unknown item {}", t.question_id))?;
            if let Some(a) = clam::metrics::contained_answer(c, refs, &norm) {
                return Err(format!("oracle reply {c:?} contains {a:?}"));
            }
        }
    }
    Ok(format!(
        "{} prompts and {clarifications} oracle replies free of reference answers",
        prompts.len()
    ))
}

fn clariq_binarization() -> Check {
    let path = common::crate_path("data/clariq_sample.tsv");
    let text = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
    let parsed = parse_clariq(text.as_bytes()).map_err(|e| e.to_string())?;
    let raw: Vec<(String, u8)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let cols: Vec<&str> = l.split('\t').collect();
            (cols[0].to_string(), cols[2].parse().unwrap())
        })
        .collect();
    ensure(raw.len() == 20 && parsed.len() == 20, || {
        format!("{} rows, {} parsed", raw.len(), parsed.len())
    })?;
    for need in 1..=4u8 {
        ensure(raw.iter().any(|r| r.1 == need), || format!("fixture lacks need {need}"))?;
    }
    for ((id, need), q) in raw.iter().zip(&parsed) {
        let expected = matches!(need, 3 | 4);
        ensure(q.id == *id && q.ambiguous == expected, || {
            format!("topic {id}: need {need} labelled ambiguous={}", q.ambiguous)
        })?;
    }
    let amb = parsed.iter().filter(|q| q.ambiguous).count();
    Ok(format!(
        "20 rows exact: {amb} ambiguous (needs 3,4), {} unambiguous (needs 1,2)",
        20 - amb
    ))
}

fn live_smoke() -> Option<Check> {
    if std::env::var(clam::lm::API_KEY_ENV).map_or(true, |k| k.trim().is_empty()) {
        return None;
    }
    Some((|| {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let corpus = std::env::var("CLAM_LIVE_CORPUS").map_or_else(|_| common::sample_corpus(), Into::into);
        let items = load_pairs(&corpus).map_err(|e| e.to_string())?.len() * 2;
        let mut config = RunConfig::new(
            DatasetSpec {
                path: corpus,
                kind: DatasetKind::AmbigTrivia,
            },
            BackendSpec::Openai {
                model: None,
                base_url: None,
            },
            dir.path(),
        );
        config.policies = vec![Policy::Clam];
        config.seed = 7;
        config.detect_sample = Some(items.min(80));
        config.qa_sample = Some(items.min(80));
        let run = run_experiment(&config).map_err(|e| e.to_string())?;
        let auroc = run
            .metrics
            .detection
            .as_ref()
            .and_then(|d| d.auroc)
            .ok_or("no detection AUROC")?;
        let routing = run
            .metrics
            .policy(Policy::Clam)
            .and_then(|m| m.report.as_ref())
            .map(|r| r.routing)
            .ok_or("no Clam report")?;
        ensure(auroc > 0.5, || format!("AUROC {auroc:.3} not above 0.5"))?;
        ensure(routing.ambiguous_asked > routing.unambiguous_asked, || {
            format!(
                "asked {} ambiguous vs {} unambiguous",
                routing.ambiguous_asked, routing.unambiguous_asked
            )
        })?;
        Ok(format!(
            "AUROC {auroc:.3} (margin {:+.3}); asked on {} ambiguous vs {} unambiguous",
            auroc - 0.5,
            routing.ambiguous_asked,
            routing.unambiguous_asked
        ))
    })())
}

fn main() -> ExitCode {
    let results = [
        report("auroc_oracle_equivalence", Some(AUROC_BUDGET), || Some(auroc_oracle())),
        report("adjusted_accuracy_algebra", Some(ALGEBRA_BUDGET), || {
            Some(adjusted_algebra())
        }),
        report("routing_grammar", Some(ROUTING_BUDGET), || Some(routing_grammar())),
        report("scripted_end_to_end_gap", Some(GAP_BUDGET), || Some(end_to_end_gap())),
        report("prompt_goldens", None, || Some(prompt_goldens())),
        report("leakage", None, || Some(leakage())),
        report("clariq_binarization", None, || Some(clariq_binarization())),
        report("live_smoke", None, live_smoke),
    ];
    if results.iter().all(|ok| *ok) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
