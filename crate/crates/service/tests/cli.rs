use std::process::Command;

fn majorness() -> Command {
    Command::new(env!("CARGO_BIN_EXE_majorness"))
}

#[test]
fn help_lists_every_subcommand() {
    let out = majorness().arg("--help").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for cmd in ["serve", "simulate", "rank", "anchors", "reliability", "features", "train", "evaluate", "all"] {
        assert!(text.contains(cmd), "help lacks {cmd}");
    }
    for flag in ["--data-dir", "--seed", "--config"] {
        assert!(text.contains(flag), "help lacks {flag}");
    }
}

#[test]
fn stages_run_from_the_command_line() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("study.json");
    std::fs::write(
        &config,
        r#"{"anchor_count": 4, "excerpt_seconds": 2, "simulation": {"items": 10, "ranking_items": 8, "raters": 6, "mode_major": 0, "mode_minor": 0}}"#,
    )
    .unwrap();
    let dir = tmp.path().join("d");
    let run = |args: &[&str]| majorness().args(["--config", config.to_str().unwrap(), "--data-dir", dir.to_str().unwrap(), "--seed", "5"]).args(args).output().unwrap();

    let out = run(&["simulate"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["seed"], 5);
    assert_eq!(summary["pairs"], 28);

    let out = run(&["anchors"]);
    assert!(out.status.success());
    let anchors = std::fs::read_to_string(dir.join("anchors.txt")).unwrap();
    assert_eq!(anchors.lines().count(), 4);
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let out = majorness().args(["--data-dir", tmp.path().to_str().unwrap(), "train"]).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("run `reliability` first"), "{err}");

    let out = majorness().arg("rank").output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("--data-dir"));

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"raters_per_pair": 0}"#).unwrap();
    let out = majorness().args(["--config", bad.to_str().unwrap(), "--data-dir", "x", "rank"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("raters_per_pair"));
}
