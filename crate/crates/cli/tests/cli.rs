//! Drives the `sasv` binary end to end.

use std::path::Path;
use std::process::{Command, Output};

fn sasv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sasv"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = sasv(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn err(args: &[&str]) -> String {
    let out = sasv(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn set_keys(config: &Path, keys: &[(&str, &str)]) {
    let text = std::fs::read_to_string(config).unwrap();
    let out: String = text
        .lines()
        .map(|l| {
            let key = l.split('=').next().unwrap().trim();
            match keys.iter().find(|(k, _)| *k == key) {
                Some((k, v)) => format!("{k} = {v}\n"),
                None => format!("{l}\n"),
            }
        })
        .collect();
    std::fs::write(config, out).unwrap();
}

#[test]
fn synth_train_extract_score_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&[
        "synth",
        "--out",
        p(&data),
        "--speakers",
        "3",
        "--utts",
        "4",
        "--eval-utts",
        "3",
        "--min-frames",
        "40",
        "--max-frames",
        "60",
        "--dim",
        "6",
        "--trials-per-speaker",
        "4",
    ]);
    for f in ["train.list", "eval.list", "trials", "model.config"] {
        assert!(data.join(f).exists(), "{f} missing");
    }
    let config = data.join("model.config");
    set_keys(&config, &[("epochs", "1"), ("batch_size", "4"), ("chunk_frames", "30")]);

    let model = dir.path().join("model.saem");
    ok(&["train", "--config", p(&config), "--out", p(&model)]);
    assert!(dir.path().join("model.saem.config").exists());
    let losses = std::fs::read_to_string(dir.path().join("model.saem.loss")).unwrap();
    assert_eq!(losses.lines().count(), 3);

    let emb = dir.path().join("emb");
    ok(&[
        "extract",
        "--model",
        p(&model),
        "--manifest",
        p(&data.join("eval.list")),
        "--out",
        p(&emb),
    ]);
    assert_eq!(std::fs::read_dir(&emb).unwrap().count(), 9);

    let scores = dir.path().join("scores.txt");
    ok(&[
        "score",
        "--embeddings",
        p(&emb),
        "--trials",
        p(&data.join("trials")),
        "--out",
        p(&scores),
    ]);
    let trials = std::fs::read_to_string(data.join("trials")).unwrap().lines().count();
    assert_eq!(std::fs::read_to_string(&scores).unwrap().lines().count(), trials);

    let line = ok(&["eval", "--scores", p(&scores), "--trials", p(&data.join("trials"))]);
    assert!(
        line.starts_with("EER ") && line.contains("DCF0.01") && line.contains("DCF0.001"),
        "{line}"
    );
    let raw = ok(&[
        "eval",
        "--scores",
        p(&scores),
        "--trials",
        p(&data.join("trials")),
        "--unnormalized-dcf",
    ]);
    assert!(raw.starts_with("EER "));
}

#[test]
fn params_lists_components_and_total() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.config");
    std::fs::write(&config, "architecture = stat_pool\n").unwrap();
    let out = ok(&["params", "--config", p(&config)]);
    assert!(out.lines().any(|l| l.starts_with("tdnn1.affine ")));
    let total: usize = out
        .lines()
        .last()
        .unwrap()
        .split_whitespace()
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    let sum: usize = out
        .lines()
        .filter(|l| !l.starts_with("total"))
        .map(|l| l.split_whitespace().nth(1).unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(sum, total);
}

#[test]
fn config_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.config");
    std::fs::write(&config, "layers = 2\n# fine\nmodel_dimm = 3\n").unwrap();
    let msg = err(&["params", "--config", p(&config)]);
    assert!(msg.contains("bad.config:3") && msg.contains("model_dimm"), "{msg}");

    std::fs::write(&config, "layers = 2\nlayers = 3\n").unwrap();
    assert!(err(&["params", "--config", p(&config)]).contains("duplicate"));
}

#[test]
fn train_without_manifest_fails() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.config");
    std::fs::write(&config, "epochs = 1\n").unwrap();
    let msg = err(&["train", "--config", p(&config), "--out", p(&dir.path().join("m"))]);
    assert!(msg.contains("manifest"), "{msg}");
}

#[test]
fn corrupt_feature_file_reports_offset() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("a.saef"), b"NOPE\x01\x00\x00\x00").unwrap();
    std::fs::write(dir.path().join("trials"), "a a target\n").unwrap();
    let msg = err(&[
        "score",
        "--embeddings",
        p(dir.path()),
        "--trials",
        p(&dir.path().join("trials")),
        "--out",
        p(&dir.path().join("s")),
    ]);
    assert!(msg.contains("byte 0"), "{msg}");
}

#[test]
fn eval_rejects_single_class_trials() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("trials"), "a b target\nc d target\n").unwrap();
    std::fs::write(dir.path().join("scores"), "a b 0.5\nc d 0.1\n").unwrap();
    err(&[
        "eval",
        "--scores",
        p(&dir.path().join("scores")),
        "--trials",
        p(&dir.path().join("trials")),
    ]);
}
