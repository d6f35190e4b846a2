use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_tracelm");

/// Small enough to train in seconds, big enough for every stage to run.
const TINY_CONFIG: &str = r#"{
  "seed": 5,
  "data": { "kind": "synth", "n_students": 24, "n_questions": 10, "n_concepts": 4, "interactions_per_student": 12 },
  "max_history": 6,
  "d_e": 16, "n_layers": 1, "n_heads": 2, "max_seq_len": 256,
  "d_t": 8, "ctx_heads": 2, "ctx_max_len": 32,
  "seq_train": { "d_s": 8, "hidden": 8, "epochs": 2, "items_per_epoch": 20 },
  "pretrain": { "epochs": 1, "batch": 4 },
  "pretrain_windows": 12,
  "train": { "epochs": 1, "batch": 4, "items_per_epoch": 12, "valid_cap": 12 },
  "train_history_cap": 4,
  "eval_cap": 16
}"#;

fn tracelm(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = tracelm(args);
    assert!(
        out.status.success(),
        "tracelm {args:?} failed:\n{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn setup(dir: &Path) -> String {
    let cfg = dir.join("cfg.json");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    cfg.to_string_lossy().into_owned()
}

#[test]
fn full_pipeline_runs_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out_s = out.to_string_lossy().into_owned();
    let cfg = setup(dir.path());

    ok(&["synth", "--config", &cfg, "--out", &out_s]);
    ok(&["prepare", "--out", &out_s]);
    ok(&["train-seq", "--out", &out_s]);
    ok(&["train", "--out", &out_s]);
    let printed = ok(&["eval", "--out", &out_s]);

    for name in [
        "config.json",
        "data.csv",
        "oracle.json",
        "splits.json",
        "seq_model.json",
        "seq_metrics.json",
        "id_embeddings.json",
        "llmkt.json",
        "curves.csv",
        "metrics.json",
        "metrics.csv",
    ] {
        assert!(out.join(name).exists(), "missing artifact {name}");
    }

    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    for key in ["auc", "acc", "n", "fingerprint"] {
        assert!(metrics.get(key).is_some(), "metrics.json lacks {key}");
    }
    assert!(printed.contains("fingerprint"));

    let first = std::fs::read(out.join("metrics.json")).unwrap();
    ok(&["eval", "--out", &out_s]);
    let second = std::fs::read(out.join("metrics.json")).unwrap();
    assert_eq!(first, second, "repeated eval changed metrics.json");

    let curves = std::fs::read_to_string(out.join("curves.csv")).unwrap();
    assert!(curves.starts_with("epoch,train_loss,valid_auc\n"));
}

#[test]
fn ablate_emits_the_five_variant_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out_s = out.to_string_lossy().into_owned();
    let cfg = setup(dir.path());

    ok(&["synth", "--config", &cfg, "--out", &out_s]);
    ok(&["prepare", "--out", &out_s]);
    ok(&["ablate", "--out", &out_s]);

    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.trim_end().lines().collect();
    assert_eq!(lines[0], "variant,auc,acc,n");
    assert_eq!(lines.len(), 6, "expected five variant rows:\n{csv}");
    let variants: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(variants, ["full", "-question", "-concept", "-sequence", "-context"]);

    let again = {
        ok(&["ablate", "--out", &out_s]);
        std::fs::read_to_string(out.join("ablation.csv")).unwrap()
    };
    assert_eq!(csv, again, "ablation rerun was not bit-exact");
}

#[test]
fn eval_without_a_checkpoint_names_the_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out_s = dir.path().join("empty").to_string_lossy().into_owned();
    let result = tracelm(&["eval", "--out", &out_s]);
    assert_eq!(result.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("llmkt.json"), "stderr should name the artifact: {stderr}");
}

#[test]
fn user_errors_exit_one_with_usage_or_reason() {
    let unknown = tracelm(&["frobnicate"]);
    assert_eq!(unknown.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("Usage"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"max_histroy": 9}"#).unwrap();
    let out_s = dir.path().join("out").to_string_lossy().into_owned();
    let result = tracelm(&["prepare", "--config", bad.to_str().unwrap(), "--out", &out_s]);
    assert_eq!(result.status.code(), Some(1));

    let result = tracelm(&["train-seq", "--out", &out_s]);
    assert_eq!(result.status.code(), Some(1), "missing splits should be a user error");
}

#[test]
fn help_prints_and_exits_zero() {
    let help = tracelm(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    let text = String::from_utf8_lossy(&help.stdout);
    for sub in ["synth", "prepare", "train-seq", "train", "eval", "ablate", "sweep-length", "sweep-merge"]
    {
        assert!(text.contains(sub), "help should list {sub}");
    }
}

#[test]
fn train_seq_rejects_encoderless_configs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    let mut cfg: serde_json::Value = serde_json::from_str(TINY_CONFIG).unwrap();
    cfg["seq_encoder"] = "token-init".into();
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out_s = dir.path().join("out").to_string_lossy().into_owned();
    let result =
        tracelm(&["train-seq", "--config", cfg_path.to_str().unwrap(), "--out", &out_s]);
    assert_eq!(result.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&result.stderr).contains("standalone"));
}
