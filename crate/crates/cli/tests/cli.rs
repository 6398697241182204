//! End-to-end checks of the installed binary: exit codes, file outputs,
//! and rerun determinism.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn moelora(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moelora"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SMALL_CONFIG: &str = r#"{
    "steps": 8,
    "d": 8,
    "batch_size": 8,
    "n_experts": 4,
    "lora_rank": 2,
    "top_k": 2,
    "eval_batches": 2,
    "task": {"n_clusters": 2}
}"#;

#[test]
fn params_reports_equal_counts_for_the_reference_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let out = moelora(&["params"], dir.path());
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    let matches = text.matches("18874368").count();
    assert_eq!(
        matches, 2,
        "both adapter families must report 18874368 trainable parameters:\n{text}"
    );
}

#[test]
fn params_handles_custom_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let out = moelora(
        &[
            "params",
            "--d",
            "32",
            "--matrices",
            "2",
            "--n-experts",
            "4",
            "--expert-rank",
            "2",
            "--lora-rank",
            "10",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    assert_eq!(stdout(&out).matches("1280").count(), 2, "{}", stdout(&out));
}

#[test]
fn missing_config_exits_2_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = moelora(&["train", "--config", "no_such_config.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr(&out).contains("no_such_config.json"),
        "stderr must name the missing file: {}",
        stderr(&out)
    );
}

#[test]
fn unknown_config_keys_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), r#"{"stepz": 3}"#).unwrap();
    let out = moelora(&["train", "--config", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("stepz"), "{}", stderr(&out));
}

#[test]
fn invalid_flag_value_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), SMALL_CONFIG).unwrap();
    // top_k larger than the expert count is a config error.
    let out = moelora(
        &["train", "--config", "cfg.json", "--top-k", "9"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("top_k"), "{}", stderr(&out));
}

#[test]
fn train_writes_checkpoint_reports_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), SMALL_CONFIG).unwrap();
    let out = moelora(
        &["train", "--config", "cfg.json", "--out", "run"],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    for file in [
        "run/checkpoint/manifest.json",
        "run/checkpoint/weights.bin",
        "run/reports.jsonl",
        "run/trace.csv",
        "run/trace.metrics.json",
    ] {
        assert!(dir.path().join(file).exists(), "missing {file}");
    }
    let reports = fs::read_to_string(dir.path().join("run/reports.jsonl")).unwrap();
    assert_eq!(reports.lines().count(), 8, "one report line per step");
    let first: serde_json::Value = serde_json::from_str(reports.lines().next().unwrap()).unwrap();
    assert_eq!(first["step"], 0);
    assert!(first["task_loss"].as_f64().unwrap().is_finite());
}

#[test]
fn same_seed_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), SMALL_CONFIG).unwrap();
    for out_dir in ["a", "b"] {
        let out = moelora(
            &[
                "train", "--config", "cfg.json", "--seed", "7", "--out", out_dir,
            ],
            dir.path(),
        );
        assert!(out.status.success(), "stderr: {}", stderr(&out));
    }
    for file in ["reports.jsonl", "trace.csv", "checkpoint/weights.bin"] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        let b = fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} must be byte-identical across reruns");
    }
}

#[test]
fn seed_flag_overrides_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), SMALL_CONFIG).unwrap();
    let base = moelora(
        &["train", "--config", "cfg.json", "--out", "base"],
        dir.path(),
    );
    let reseeded = moelora(
        &[
            "train", "--config", "cfg.json", "--seed", "99", "--out", "reseeded",
        ],
        dir.path(),
    );
    assert!(base.status.success() && reseeded.status.success());
    let a = fs::read(dir.path().join("base/checkpoint/weights.bin")).unwrap();
    let b = fs::read(dir.path().join("reseeded/checkpoint/weights.bin")).unwrap();
    assert_ne!(a, b, "a different seed must change the trained weights");
}

#[test]
fn eval_prints_deterministic_json_for_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), SMALL_CONFIG).unwrap();
    let out = moelora(
        &["train", "--config", "cfg.json", "--out", "run"],
        dir.path(),
    );
    assert!(out.status.success());

    let args = [
        "eval",
        "--checkpoint",
        "run/checkpoint",
        "--batches",
        "2",
        "--batch-size",
        "8",
        "--seed",
        "5",
    ];
    let a = moelora(&args, dir.path());
    let b = moelora(&args, dir.path());
    assert!(a.status.success(), "stderr: {}", stderr(&a));
    assert_eq!(
        stdout(&a),
        stdout(&b),
        "same checkpoint + seed, same result"
    );
    let parsed: serde_json::Value = serde_json::from_str(stdout(&a).trim()).unwrap();
    assert!(parsed["mean_task_loss"].as_f64().unwrap().is_finite());
    assert!(parsed["nmi"].as_f64().unwrap() >= 0.0);
}

#[test]
fn eval_on_a_missing_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = moelora(&["eval", "--checkpoint", "nope"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("nope"), "{}", stderr(&out));
}

#[test]
fn trace_writes_the_histogram_schema() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), SMALL_CONFIG).unwrap();
    let out = moelora(
        &["train", "--config", "cfg.json", "--out", "run"],
        dir.path(),
    );
    assert!(out.status.success());
    let out = moelora(
        &[
            "trace",
            "--checkpoint",
            "run/checkpoint",
            "--out",
            "routing.csv",
            "--batches",
            "2",
            "--batch-size",
            "8",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let body = fs::read_to_string(dir.path().join("routing.csv")).unwrap();
    assert!(
        body.starts_with("layer,token_type,expert,count,fraction"),
        "stable CSV schema: {body}"
    );
    assert!(
        stdout(&out).contains("token type frequencies"),
        "{}",
        stdout(&out)
    );
}

#[test]
fn ablate_produces_one_row_per_grid_cell() {
    let dir = tempfile::tempdir().unwrap();
    let spec = format!(r#"{{"base": {SMALL_CONFIG}, "top_k": [1, 2], "seeds": [0]}}"#);
    fs::write(dir.path().join("spec.json"), spec).unwrap();
    let out = moelora(
        &["ablate", "--config", "spec.json", "--out", "ablation.csv"],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let body = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(body.lines().count(), 3, "header + 2 rows:\n{body}");
    assert!(body.starts_with("top_k,beta,"));
}

#[test]
fn ablate_with_no_seeds_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let spec = format!(r#"{{"base": {SMALL_CONFIG}, "seeds": []}}"#);
    fs::write(dir.path().join("spec.json"), spec).unwrap();
    let out = moelora(
        &["ablate", "--config", "spec.json", "--out", "ablation.csv"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("seeds"), "{}", stderr(&out));
}

#[test]
fn help_documents_the_precedence_order() {
    let dir = tempfile::tempdir().unwrap();
    let out = moelora(&["--help"], dir.path());
    assert!(out.status.success());
    assert!(
        stdout(&out).contains("Precedence"),
        "--help must document flag/config/default precedence:\n{}",
        stdout(&out)
    );
}
