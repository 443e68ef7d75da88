use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn privneuron(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_privneuron"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_all_then_reuse() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let config = smoke_config();
    let args = ["run-all", "--config", config.to_str().unwrap(), "--out", out, "--set", "finetune.epochs=1"];
    let first = privneuron(&args);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let text = stdout(&first);
    assert_eq!(text.lines().count(), 10);
    assert!(text.lines().all(|l| l.split_whitespace().nth(1) == Some("ran")), "{text}");
    assert!(text.starts_with("gen-corpus"));
    assert!(dir.path().join("manifest.json").exists());

    let second = privneuron(&args);
    assert!(second.status.success());
    assert!(stdout(&second).lines().all(|l| l.split_whitespace().nth(1) == Some("reused")));

    let reseeded = privneuron(&["eval", "--config", config.to_str().unwrap(), "--out", out, "--seed", "9"]);
    assert!(reseeded.status.success());
    let lines: Vec<String> = stdout(&reseeded).lines().map(String::from).collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("eval"));
    assert!(lines.iter().all(|l| l.contains(" ran ")));
}

#[test]
fn bad_arguments_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let bad_set = privneuron(&["gen-corpus", "--out", out, "--set", "corpus.n_records"]);
    assert!(!bad_set.status.success());
    assert!(String::from_utf8_lossy(&bad_set.stderr).contains("KEY=VALUE"));

    let bad_value = privneuron(&["gen-corpus", "--out", out, "--set", "selection.tau1=2"]);
    assert!(!bad_value.status.success());

    let bad_stage = privneuron(&["run-all", "--out", out, "--stage", "everything"]);
    assert!(!bad_stage.status.success());
    assert!(String::from_utf8_lossy(&bad_stage.stderr).contains("unknown stage"));

    let missing = privneuron(&["report", "--config", "/nonexistent/run.toml"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("/nonexistent/run.toml"));
}

#[test]
fn help_lists_every_stage() {
    let help = privneuron(&["--help"]);
    assert!(help.status.success());
    let text = stdout(&help);
    for cmd in [
        "gen-corpus", "pretrain", "finetune", "eval", "trace-lens", "trace-sim", "attribute", "select",
        "intervene", "report", "run-all",
    ] {
        assert!(text.contains(cmd), "missing {cmd}");
    }
}
