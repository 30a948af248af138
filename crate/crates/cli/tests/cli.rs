use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn dcvit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcvit")).args(args).output().expect("spawn dcvit")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, value: &Value) -> PathBuf {
    let path = dir.join("cfg.json");
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn tiny_model() -> Value {
    json!({
        "c_max": 3, "image_size": 8, "patch_size": 4, "dim": 8, "depth": 2, "heads": 2,
        "channel_layers": [2], "mlp_ratio": 2.0, "num_classes": 2
    })
}

fn train_config(steps: usize) -> Value {
    json!({
        "model": tiny_model(),
        "train": {"steps": steps, "batch_size": 8, "eval_every": 5, "seed": 3},
        "task": {"kind": "xor_channels", "channels": 3, "image_size": 8, "num_classes": 2,
                 "informative_channels": [0, 1], "seed": 5},
        "data": {"n_samples": 60, "split": [0.5, 0.5, 0.0]}
    })
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn bench_writes_csv_and_slopes() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        &json!({"bench": {"C_list": [2, 4, 8], "N": 4, "D": 8, "L": 2, "M": [1], "heads": 2, "repeats": 3}}),
    );
    let out = dir.path().join("bench.csv");
    let o = dcvit(&["bench", "--config", path_str(&cfg), "--out", path_str(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 7);
    assert_eq!(lines[0], "mode,C,N,D,L,m,analytic_flops,wall_time_s,repeats");

    let text = stdout(&o);
    let flops_slope = |mode: &str| -> f64 {
        let line = text.lines().find(|l| l.starts_with(&format!("{mode} log-log slope"))).unwrap();
        line.split("flops ").nth(1).unwrap().split(',').next().unwrap().parse().unwrap()
    };
    assert!(flops_slope("msa") > flops_slope("dsa"), "{text}");
}

#[test]
fn bench_without_section_is_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &json!({"model": tiny_model()}));
    let o = dcvit(&["bench", "--config", path_str(&cfg), "--out", path_str(&dir.path().join("b.csv"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bench"), "{}", stderr(&o));
}

#[test]
fn bench_unwritable_output_fails() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &json!({"bench": {"C_list": [2], "N": 4, "D": 8, "L": 1, "M": [], "heads": 2, "repeats": 3}}));
    let out = dir.path().join("missing").join("b.csv");
    let o = dcvit(&["bench", "--config", path_str(&cfg), "--out", path_str(&out)]);
    assert_eq!(code(&o), 3);
}

#[test]
fn unknown_key_is_config_error_with_path() {
    let dir = TempDir::new().unwrap();
    let mut v = train_config(1);
    v["train"]["learning_rate"] = json!(0.1);
    let cfg = write_config(dir.path(), &v);
    let o = dcvit(&[
        "train",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&dir.path().join("m.dcvt")),
        "--history",
        path_str(&dir.path().join("h.jsonl")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("train.learning_rate"), "{}", stderr(&o));
}

#[test]
fn missing_config_file_is_io_error() {
    let o = dcvit(&["gradcheck", "--config", "/nonexistent/cfg.json"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn train_smoke_then_eval_reproduces_accuracy() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &train_config(10));
    let model = dir.path().join("m.dcvt");
    let hist = dir.path().join("h.jsonl");
    let o = dcvit(&["train", "--config", path_str(&cfg), "--out", path_str(&model), "--history", path_str(&hist)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(model.exists());

    let lines: Vec<Value> = std::fs::read_to_string(&hist)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["step"], 5);
    let summary = lines.last().unwrap();
    assert_eq!(summary["final"], true);
    let recorded = summary["final_val_accuracy"].as_f64().unwrap();

    let o = dcvit(&["eval", "--config", path_str(&cfg), "--model", path_str(&model)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let reloaded: f64 = stdout(&o).trim().strip_prefix("val accuracy ").unwrap().parse().unwrap();
    assert_eq!(reloaded, recorded);
}

#[test]
fn train_with_one_step_produces_both_files() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &train_config(1));
    let model = dir.path().join("m.dcvt");
    let hist = dir.path().join("h.jsonl");
    let o = dcvit(&["train", "--config", path_str(&cfg), "--out", path_str(&model), "--history", path_str(&hist)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(model.exists() && hist.exists());
}

#[test]
fn corrupted_model_magic_is_format_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &train_config(1));
    let model = dir.path().join("m.dcvt");
    let hist = dir.path().join("h.jsonl");
    let o = dcvit(&["train", "--config", path_str(&cfg), "--out", path_str(&model), "--history", path_str(&hist)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut bytes = std::fs::read(&model).unwrap();
    bytes[..4].copy_from_slice(b"XXXX");
    std::fs::write(&model, bytes).unwrap();
    let o = dcvit(&["eval", "--config", path_str(&cfg), "--model", path_str(&model)]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("bad magic"), "{}", stderr(&o));
}

#[test]
fn train_rejects_invalid_config() {
    let dir = TempDir::new().unwrap();
    let mut v = train_config(1);
    v["model"]["heads"] = json!(3);
    let cfg = write_config(dir.path(), &v);
    let o = dcvit(&[
        "train",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&dir.path().join("m.dcvt")),
        "--history",
        path_str(&dir.path().join("h.jsonl")),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let mut v = train_config(1);
    v["task"]["channels"] = json!(5);
    v["task"]["informative_channels"] = json!([0, 4]);
    let cfg = write_config(dir.path(), &v);
    let o = dcvit(&[
        "train",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&dir.path().join("m.dcvt")),
        "--history",
        path_str(&dir.path().join("h.jsonl")),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn gradcheck_tiny_model_passes() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &json!({"model": tiny_model()}));
    let o = dcvit(&["gradcheck", "--config", path_str(&cfg)]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("alpha") && text.contains("f64"), "{text}");
}

#[test]
fn gradcheck_detects_corrupted_backward() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &json!({"model": tiny_model()}));
    let o = dcvit(&["gradcheck", "--config", path_str(&cfg), "--inject-fault", "gelu-backward"]);
    assert_eq!(code(&o), 1, "{}", stdout(&o));
}

#[test]
fn gradcheck_rejects_oversized_model() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &json!({"model": {"dim": 128, "depth": 4, "heads": 4, "channel_layers": [1]}}));
    let o = dcvit(&["gradcheck", "--config", path_str(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("parameters"), "{}", stderr(&o));
}

#[test]
fn check_passes_lists_each_invariant_once_and_repeats() {
    let a = dcvit(&["check", "--seed", "11"]);
    assert_eq!(code(&a), 0, "{}", stdout(&a));
    let rows: Vec<String> = stdout(&a)
        .lines()
        .filter(|l| l.starts_with("PASS") || l.starts_with("FAIL"))
        .map(|l| l.split_whitespace().nth(1).unwrap().to_string())
        .collect();
    assert_eq!(rows, dcvit::check::check_names());
    let b = dcvit(&["check", "--seed", "11"]);
    assert_eq!(stdout(&a), stdout(&b));
}
