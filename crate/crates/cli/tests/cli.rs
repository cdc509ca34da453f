use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ffn-lens"))
        .current_dir(dir)
        .env_remove("FFNLENS_OUT_DIR")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

const QUICK: &str = "seed = 3
output_dir = \"run\"

[corpus]
path = \"corpus.tsv\"
sample_size = 30

[model]
n_layers = 3
d_model = 16
n_heads = 2
d_ff = 32

[train]
steps = 12
batch_size = 8

[analysis]
k_values = [2, 5]

[probe]
epochs = 30
";

#[test]
fn missing_corpus_exits_with_usage_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["--corpus", "nope.tsv", "prepare"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}

#[test]
fn stage_before_its_dependency_exits_with_usage_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["analyze"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("capture"));
}

#[test]
fn bad_flags_and_configs_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(tmp.path(), &["--bogus"]).status.code(), Some(2));
    std::fs::write(tmp.path().join("bad.toml"), "[model]\nlayers = 2\n").unwrap();
    assert_eq!(run(tmp.path(), &["-c", "bad.toml", "config"]).status.code(), Some(2));
}

#[test]
fn config_prints_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["--seed", "42", "config"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l == "seed = 42"), "{text}");
}

#[test]
fn toy_corpus_then_all() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = run(dir, &["toy-corpus", "--pairs", "2000", "--output", "corpus.tsv"]);
    assert!(out.status.success());
    assert_eq!(std::fs::read_to_string(dir.join("corpus.tsv")).unwrap().lines().count(), 2000);

    std::fs::write(dir.join("quick.toml"), QUICK).unwrap();
    let out = run(dir, &["-c", "quick.toml", "--sequential", "all"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 3);
    assert!(dir.join("run/report.md").exists());

    let again = run(dir, &["-c", "quick.toml", "-j", "1", "report"]);
    assert!(again.status.success());
    assert_eq!(String::from_utf8(again.stdout).unwrap(), stdout);
}
