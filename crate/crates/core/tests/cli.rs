use std::path::Path;
use std::process::{Command, Output};

use tdil::datastore::Dataset;
use tdil::trainer::EvalReport;

const SMALL: &[&str] = &[
    "--set", "image_size=32", "--set", "fovea_size=16", "--set", "gaze.channels=4,8",
    "--set", "gaze.hidden=8", "--set", "policy.d_model=8", "--set", "policy.heads=2",
    "--set", "policy.layers=1", "--set", "policy.ffn_dim=16", "--set", "policy.mlp_hidden=10",
    "--set", "policy.channels=4,8", "--set", "train.epochs=1", "--set", "train.batch_size=32",
];

fn tdil(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tdil")).args(args).output().unwrap()
}

fn tdil_ok(args: &[&str], small: bool) {
    let mut all = args.to_vec();
    if small {
        all.extend_from_slice(SMALL);
    }
    let out = tdil(&all);
    assert!(
        out.status.success(),
        "tdil {all:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn zero_episodes_gives_header_only_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("empty.badm");
    tdil_ok(&["gen-data", "--task", "pushbox", "--episodes", "0", "--out", s(&data)], false);
    let ds = Dataset::read(&data).unwrap();
    assert!(ds.episodes.is_empty());
    assert_eq!(ds.task.name(), "pushbox");
    assert!(dir.path().join("empty.badm.manifest.json").exists());
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.badm");
    let out = tdil(&[
        "gen-data", "--task", "picktwo", "--episodes", "1", "--out", s(&data),
        "--set", "train.learning_rate=3",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.learning_rate"));
    assert!(!data.exists());
}

#[test]
fn unknown_task_and_variant_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.badm");
    let out = tdil(&["gen-data", "--task", "stack", "--episodes", "1", "--out", s(&data)]);
    assert_eq!(out.status.code(), Some(1));
    let out = tdil(&["train-policy", "--data", s(&data), "--variant", "lstm", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_or_corrupt_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.badm");
    let out = tdil(&["train-gaze", "--data", s(&missing), "--out", s(&dir.path().join("g"))]);
    assert_eq!(out.status.code(), Some(2));

    let junk = dir.path().join("junk.badm");
    std::fs::write(&junk, b"BADM\x01\x00\x00\x00garbage").unwrap();
    let out = tdil(&["train-gaze", "--data", s(&junk), "--out", s(&dir.path().join("g"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_and_overrides_reach_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.badm");
    tdil_ok(&["gen-data", "--task", "picktwo", "--episodes", "2", "--seed", "3", "--out", s(&data)], true);
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# small run\ntrain.batch_size = 16\npolicy.dropout = 0.0\n").unwrap();
    let run = dir.path().join("gap");
    tdil_ok(
        &[
            "train-policy", "--data", s(&data), "--variant", "baseline-gap", "--out", s(&run),
            "--config", s(&cfg), "--set", "train.batch_size=8",
        ],
        false,
    );
    let text = std::fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(text.lines().any(|l| l == "train.batch_size = 8"), "{text}");
    assert!(text.lines().any(|l| l == "policy.variant = baseline-gap"), "{text}");
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.lines().count() >= 2);
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let data = p("d.badm");
    tdil_ok(&["gen-data", "--task", "picktwo", "--episodes", "3", "--seed", "1", "--out", s(&data)], true);
    tdil_ok(&["train-gaze", "--data", s(&data), "--out", s(&p("gaze"))], true);
    tdil_ok(&["train-policy", "--data", s(&data), "--out", s(&p("policy"))], true);
    for run in ["gaze", "policy"] {
        for f in ["checkpoint.batn", "config.txt", "manifest.json", "metrics.csv"] {
            assert!(p(run).join(f).exists(), "{run}/{f}");
        }
    }

    tdil_ok(
        &[
            "eval", "--policy", s(&p("policy")), "--gaze", s(&p("gaze")), "--task", "picktwo",
            "--episodes", "2", "--out", s(&p("eval")),
        ],
        false,
    );
    let report: EvalReport =
        serde_json::from_str(&std::fs::read_to_string(p("eval").join("report.json")).unwrap()).unwrap();
    assert_eq!(report.n_episodes, 2);
    assert_eq!(report.episodes.len(), 2);
    assert!(p("eval").join("attention.batt").exists());

    tdil_ok(&["analyze-attention", "--eval", s(&p("eval")), "--out", s(&p("attn"))], false);
    for f in ["traces.csv", "summary.csv", "analysis.json"] {
        assert!(p("attn").join(f).exists(), "{f}");
    }
    let analysis: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p("attn").join("analysis.json")).unwrap()).unwrap();
    assert!(analysis.is_object());
}

#[test]
fn expert_eval_succeeds_on_pushbox() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("expert");
    tdil_ok(&["eval", "--expert", "--task", "pushbox", "--episodes", "3", "--seed", "5", "--out", s(&out)], false);
    let report: EvalReport =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(report.episodes.iter().all(|e| e.success));
}
