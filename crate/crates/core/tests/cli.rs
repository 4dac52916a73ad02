use std::path::Path;
use std::process::{Command, Output};

use cascade_core::io::read_dataset;
use cascade_core::rng::Stream;
use cascade_core::synth::gen_dataset;

const SMALL: &str = "train_scenes = 40\ntest_scenes = 12\n[cascade]\niterations = 150\nlog_every = 50\n";

fn cascade(args: &[&str], dir: &Path) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_cascade")).args(args).current_dir(dir).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

#[test]
fn gen_is_deterministic_and_parses() {
    let dir = setup();
    let d = dir.path();
    cascade(&["gen", "--config", "small.toml", "--seed", "7", "--out", "a.jsonl"], d);
    cascade(&["gen", "--config", "small.toml", "--seed", "7", "--out", "b.jsonl"], d);
    let a = std::fs::read(d.join("a.jsonl")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b.jsonl")).unwrap());

    let (header, scenes) = read_dataset(&d.join("a.jsonl")).unwrap();
    assert_eq!(scenes.len(), 40);
    assert_eq!(header.seed, 7);

    // The header alone is enough to regenerate the file's scenes.
    assert_eq!(gen_dataset(&header.scene_config, header.seed, Stream::TrainScenes, scenes.len()), scenes);

    cascade(&["gen", "--config", "small.toml", "--split", "test", "--out", "t.jsonl"], d);
    let (h, test) = read_dataset(&d.join("t.jsonl")).unwrap();
    assert_eq!(test.len(), 12);
    assert_eq!(h.split.as_deref(), Some("test"));
    assert_ne!(test[0], scenes[0]);
}

#[test]
fn train_then_eval_writes_reports() {
    let dir = setup();
    let d = dir.path();
    cascade(&["gen", "--config", "small.toml", "--out", "train.jsonl"], d);
    cascade(&["gen", "--config", "small.toml", "--split", "test", "--out", "test.jsonl"], d);
    cascade(&["train", "--config", "small.toml", "--data", "train.jsonl", "--out", "run"], d);
    assert!(d.join("run/model.json").exists());
    let log = std::fs::read_to_string(d.join("run/train_log.csv")).unwrap();
    assert!(log.starts_with("iteration,stage,loss"));

    cascade(&["eval", "--config", "small.toml", "--model", "run/model.json", "--data", "test.jsonl", "--out", "run"], d);
    let metrics: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("run/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["variant"], "cascade");
    assert_eq!(metrics["test_stage"], "1~3");
    let per_stage = std::fs::read_to_string(d.join("run/per_stage.csv")).unwrap();
    // Stages 1..3 plus ensembles of two and three.
    assert_eq!(per_stage.lines().count(), 1 + 5);

    let first = cascade(&["eval", "--config", "small.toml", "--model", "run/model.json", "--data", "test.jsonl", "--out", "again"], d);
    assert!(!first.stdout.is_empty());
    assert_eq!(std::fs::read(d.join("run/metrics.json")).unwrap(), std::fs::read(d.join("again/metrics.json")).unwrap());

    let inspect = cascade(&["inspect", "run/model.json"], d);
    let v: serde_json::Value = serde_json::from_slice(&inspect.stdout).unwrap();
    assert_eq!(v["kind"], "model");
    assert_eq!(v["thresholds"], serde_json::json!([0.5, 0.6, 0.7]));
}

#[test]
fn training_is_reproducible() {
    let dir = setup();
    let d = dir.path();
    for out in ["x", "y"] {
        cascade(&["train", "--config", "small.toml", "--variant", "integral", "--out", out], d);
    }
    assert_eq!(std::fs::read(d.join("x/model.json")).unwrap(), std::fs::read(d.join("y/model.json")).unwrap());
}

#[test]
fn bad_input_exits_with_error() {
    let dir = setup();
    let d = dir.path();
    std::fs::write(d.join("bad.toml"), "[cascade]\nthresholds = [0.7, 0.5]\n").unwrap();
    for args in [vec!["gen", "--config", "bad.toml"], vec!["experiment", "nonsense"], vec!["eval", "--model", "missing.json"]] {
        let out = Command::new(env!("CARGO_BIN_EXE_cascade")).args(&args).current_dir(d).output().unwrap();
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
}
