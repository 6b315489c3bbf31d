//! End-to-end tests of the command-line harness: exit codes, config
//! resolution and echo, determinism of training artifacts, and the
//! eval/inspect/gen-data commands.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn forge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shakti-forge"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(path: &Path, contents: &str) {
    fs::write(path, contents).unwrap();
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A stage-1 toy config small enough for tests.
const TINY_STAGE1: &str = r#"{
  "model": "toy",
  "stage": 1,
  "stage_cfg": { "total_steps": 6, "warmup_steps": 1 },
  "data": { "micro_batch": 2 }
}"#;

#[test]
fn train_is_deterministic_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    write(&cfg, TINY_STAGE1);
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let r = forge(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "11",
            "--outdir",
            out.to_str().unwrap(),
        ]);
        assert!(r.status.success(), "train failed: {}", stderr(&r));
    }
    let csv_a = fs::read(out_a.join("stage1.metrics.csv")).unwrap();
    let csv_b = fs::read(out_b.join("stage1.metrics.csv")).unwrap();
    assert!(!csv_a.is_empty());
    assert_eq!(csv_a, csv_b, "metrics CSVs must be byte-identical");
    let ck_a = fs::read(out_a.join("stage1.ckpt")).unwrap();
    let ck_b = fs::read(out_b.join("stage1.ckpt")).unwrap();
    assert_eq!(ck_a, ck_b, "checkpoints must be byte-identical");
    let echo_a = fs::read(out_a.join("config.resolved.json")).unwrap();
    assert!(!echo_a.is_empty());
}

#[test]
fn resolved_echo_carries_patched_and_default_values() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    write(&cfg, TINY_STAGE1);
    let out = dir.path().join("run");
    let r = forge(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--outdir",
        out.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", stderr(&r));
    let echo: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("config.resolved.json")).unwrap()).unwrap();
    assert_eq!(echo["model"], "toy");
    assert_eq!(echo["stage"], 1);
    assert_eq!(echo["seed"], 0);
    assert_eq!(echo["stage_cfg"]["total_steps"], 6);
    // Untouched fields resolve to the stage defaults.
    assert_eq!(echo["stage_cfg"]["peak_lr"], 3e-3);
    assert_eq!(echo["stage_cfg"]["grad_accum"], 2);
    assert_eq!(echo["data"]["micro_batch"], 2);
}

#[test]
fn unknown_config_key_exits_2_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    write(
        &cfg,
        r#"{ "model": "toy", "stage": 1, "stage_cfg": { "grad_accumm": 2 } }"#,
    );
    let r = forge(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
    let err = stderr(&r);
    assert!(err.contains("grad_accumm"), "stderr was: {err}");
    assert!(err.contains("stage_cfg"), "stderr was: {err}");
}

#[test]
fn invalid_stage_value_exits_2_with_field_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    write(
        &cfg,
        r#"{ "model": "toy", "stage": 1, "stage_cfg": { "grad_accum": 0, "total_steps": 4 } }"#,
    );
    let r = forge(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
    assert!(stderr(&r).contains("grad_accum"), "stderr: {}", stderr(&r));
}

#[test]
fn missing_model_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    write(&cfg, r#"{ "stage": 1 }"#);
    let r = forge(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
    assert!(stderr(&r).contains("model"), "stderr: {}", stderr(&r));
}

#[test]
fn inspect_rejects_corrupt_checkpoint_with_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let r = forge(&["inspect", "--checkpoint", bad.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(4), "stderr: {}", stderr(&r));

    let missing = dir.path().join("nope.ckpt");
    let r = forge(&["inspect", "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(4), "stderr: {}", stderr(&r));
}

#[test]
fn truncated_checkpoint_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    write(
        &cfg,
        r#"{ "model": "toy", "stage": 1, "stage_cfg": { "total_steps": 2, "warmup_steps": 1 },
            "data": { "micro_batch": 1 } }"#,
    );
    let out = dir.path().join("run");
    let r = forge(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--outdir",
        out.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", stderr(&r));
    let ck = out.join("stage1.ckpt");
    let bytes = fs::read(&ck).unwrap();
    fs::write(&ck, &bytes[..bytes.len() / 2]).unwrap();
    let r = forge(&["inspect", "--checkpoint", ck.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(4), "stderr: {}", stderr(&r));
}

#[test]
fn eval_without_checkpoint_exits_4() {
    let r = forge(&[
        "eval",
        "--model",
        "toy",
        "--checkpoint",
        "/nonexistent/path.ckpt",
    ]);
    assert_eq!(r.status.code(), Some(4), "stderr: {}", stderr(&r));
}

#[test]
fn train_then_eval_stage1_reports_perplexity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    write(&cfg, TINY_STAGE1);
    let out = dir.path().join("run");
    let r = forge(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--outdir",
        out.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", stderr(&r));
    let eval_cfg = dir.path().join("eval.json");
    write(
        &eval_cfg,
        r#"{ "model": "toy", "stage": 1, "data": { "eval_samples": 4 } }"#,
    );
    let r = forge(&[
        "eval",
        "--config",
        eval_cfg.to_str().unwrap(),
        "--outdir",
        out.to_str().unwrap(),
        "--checkpoint",
        out.join("stage1.ckpt").to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", stderr(&r));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("eval.stage1.json")).unwrap()).unwrap();
    assert_eq!(report["metric"], "perplexity");
    let v = report["value"].as_f64().unwrap();
    assert!(v.is_finite() && v > 1.0, "perplexity {v}");
}

#[test]
fn gen_data_writes_images_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("dump");
    let r = forge(&[
        "gen-data",
        "--outdir",
        out.to_str().unwrap(),
        "--count",
        "3",
    ]);
    assert!(r.status.success(), "{}", stderr(&r));
    let manifest = fs::read_to_string(out.join("manifest.tsv")).unwrap();
    let lines: Vec<&str> = manifest.lines().collect();
    assert_eq!(lines.len(), 3);
    for line in &lines {
        let (name, caption) = line.split_once('\t').unwrap();
        assert!(!caption.is_empty());
        let ppm = fs::read(out.join(name)).unwrap();
        assert!(ppm.starts_with(b"P6"), "PPM header missing in {name}");
    }
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let r = forge(&["frobnicate"]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn stage_2_resumes_from_stage_1_checkpoint_by_convention() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg1 = dir.path().join("s1.json");
    write(&cfg1, TINY_STAGE1);
    let r = forge(&[
        "train",
        "--config",
        cfg1.to_str().unwrap(),
        "--outdir",
        out.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", stderr(&r));

    let cfg2 = dir.path().join("s2.json");
    write(
        &cfg2,
        r#"{ "model": "toy", "stage": 2,
             "stage_cfg": { "total_steps": 2, "warmup_steps": 1 },
             "data": { "micro_batch": 1 } }"#,
    );
    let r = forge(&[
        "train",
        "--config",
        cfg2.to_str().unwrap(),
        "--outdir",
        out.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", stderr(&r));
    assert!(out.join("stage2.ckpt").exists());

    // Without the stage-1 checkpoint the convention fails with exit 4.
    let out2 = dir.path().join("fresh");
    let r = forge(&[
        "train",
        "--config",
        cfg2.to_str().unwrap(),
        "--outdir",
        out2.to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(4), "stderr: {}", stderr(&r));
}
