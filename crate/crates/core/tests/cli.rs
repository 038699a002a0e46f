use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use tepose::commands::read_predictions;
use tepose::dataset::{load_video, Record};

fn tepose(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tepose")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = tepose(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: [&str; 14] = [
    "--set",
    "synth.train_3d=3",
    "--set",
    "synth.train_2d=3",
    "--set",
    "synth.test=2",
    "--set",
    "synth.real=3",
    "--set",
    "predictor.hidden=8",
    "--set",
    "predictor.regressor_width=8",
    "--set",
    "synth.length=[12, 16]",
];

/// Synthesises a small dataset and trains a few iterations on it.
fn trained(dir: &Path) -> (String, String) {
    let data = dir.join("data").display().to_string();
    let run = dir.join("run").display().to_string();
    let mut args = vec!["synth", "--out", &data];
    args.extend(SMALL);
    ok(&args);
    let mut args = vec!["train", "--data", &data, "--out", &run, "--set", "train.iterations=6"];
    args.extend(SMALL);
    ok(&args);
    (data, dir.join("run/checkpoint.tpck").display().to_string())
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(tepose(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(tepose(&["train", "--preset", "huge"]).status.code(), Some(1));
    assert_eq!(tepose(&["synth"]).status.code(), Some(1));
    assert_eq!(
        tepose(&["synth", "--out", "/tmp/x", "--set", "loader.gamma=2"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        tepose(&["synth", "--out", "/tmp/x", "--set", "no_such_key=1"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        tepose(&["eval", "--checkpoint", "/nonexistent.tpck", "--out", "/tmp/x"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn help_exits_cleanly() {
    let out = tepose(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("infer"));
}

#[test]
fn train_eval_and_stdin_streaming() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ck) = trained(dir.path());
    for f in ["losses.csv", "metrics.csv", "run.json", "checkpoint.tpck"] {
        assert!(dir.path().join("run").join(f).exists(), "{f} missing");
    }
    let losses = std::fs::read_to_string(dir.path().join("run/losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 7);

    let eval = dir.path().join("eval").display().to_string();
    ok(&[
        "eval",
        "--checkpoint",
        &ck,
        "--data",
        &data,
        "--out",
        &eval,
        "--run",
        "first",
    ]);
    ok(&[
        "eval",
        "--checkpoint",
        &ck,
        "--data",
        &data,
        "--out",
        &eval,
        "--run",
        "second",
    ]);
    let csv = std::fs::read_to_string(dir.path().join("eval/metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "run,dataset,mpjpe,pa_mpjpe,accel,mpvpe");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("first,") && lines[2].starts_with("second,"));
    assert!(lines[1].ends_with(",n/a"));
    // same checkpoint, same numbers
    assert_eq!(lines[1].split_once(',').unwrap().1, lines[2].split_once(',').unwrap().1);

    let offline = read_predictions(&dir.path().join("eval/predictions.jsonl")).unwrap();
    let id = offline[0].video.clone();
    let video = load_video(&dir.path().join(format!("data/videos/{id}.json"))).unwrap();
    let features = dir.path().join("f.bin");
    Record::new(vec![video.len(), video.feature_dim()], video.static_feats.concat())
        .unwrap()
        .save(&features)
        .unwrap();
    let from_file = ok(&["infer", "--checkpoint", &ck, "--input", features.to_str().unwrap()]);

    let mut child = Command::new(env!("CARGO_BIN_EXE_tepose"))
        .args(["infer", "--checkpoint", &ck, "--input", "-"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(&std::fs::read(&features).unwrap())
        .unwrap();
    let piped = child.wait_with_output().unwrap();
    assert!(piped.status.success());
    let strip = |s: &str| -> Vec<String> {
        s.lines()
            .map(|l| l.split_once(",\"frame\"").unwrap().1.to_string())
            .collect()
    };
    assert_eq!(strip(&from_file), strip(&String::from_utf8(piped.stdout).unwrap()));
    assert_eq!(from_file.lines().count(), video.len() - 5);
}

#[test]
fn truncated_feature_stream_fails() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ck) = trained(dir.path());
    let path = dir.path().join("bad.bin");
    let mut bytes = Record::new(vec![8, 64], vec![0.1; 8 * 64]).unwrap().to_bytes();
    bytes.truncate(bytes.len() - 20);
    std::fs::write(&path, bytes).unwrap();
    let out = tepose(&["infer", "--checkpoint", &ck, "--input", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    // complete frames before the damage are still emitted
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 8 - 1 - 5);
}

#[test]
fn gradcheck_reports_every_suite() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    let stdout = ok(&["gradcheck", "--out", &out, "--set", "gradcheck.instances=2"]);
    assert!(stdout.lines().all(|l| l.contains("PASS")));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert!(report["results"].as_array().unwrap().len() >= 15);
}
