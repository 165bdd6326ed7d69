mod common;

use std::process::Command;

fn clam() -> Command {
    Command::new(env!("CARGO_BIN_EXE_clam"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "{:?} failed: {}",
        cmd,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn validate_accepts_bundled_corpora() {
    for (file, expect) in [
        ("data/ambig_trivia_sample.jsonl", "40 questions (20 ambiguous)"),
        ("data/clariq_sample.tsv", "20 questions (10 ambiguous)"),
        ("data/claqua_single_sample.jsonl", "valid claqua_single"),
        ("data/claqua_multi_sample.jsonl", "valid claqua_multi"),
    ] {
        let out = run_ok(clam().arg("validate").arg(common::crate_path(file)));
        assert!(out.contains(expect), "{out}");
    }
}

#[test]
fn validate_rejects_a_broken_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    std::fs::write(&path, "{\"id\":\"x\",\"ambiguous\":\"a?\"}\n").unwrap();
    let out = clam().arg("validate").arg(&path).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}

#[test]
fn run_sweep_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let config = common::crate_path("configs/sample.toml");
    let stdout = run_ok(
        clam()
            .args(["run", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out_dir)
            .args(["--workers", "2"]),
    );
    let json: String = stdout.lines().take_while(|l| !l.starts_with("artifacts in")).collect();
    let metrics: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(metrics["dataset"], "ambig_trivia");

    let stdout = run_ok(
        clam()
            .args(["sweep", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out_dir)
            .args(["--param", "tau", "--values", "-inf,-0.3,0"]),
    );
    assert_eq!(stdout.lines().count(), 3);
    assert!(out_dir.join("sweep/tau.csv").is_file());

    let stdout = run_ok(clam().arg("report").arg(&out_dir));
    assert!(stdout.contains("report.md"));
    assert!(out_dir.join("report/accuracy.csv").is_file());
}

#[test]
fn run_with_missing_key_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = clam()
        .args(["run", "--config"])
        .arg(common::crate_path("configs/sample.toml"))
        .arg("--out")
        .arg(dir.path())
        .args(["--backend", "openai"])
        .env_remove("CLAM_API_KEY")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("CLAM_API_KEY"));
}
