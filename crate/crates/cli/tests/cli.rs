use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn aofl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aofl"))
        .args(args)
        .env("AOFL_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = aofl(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn synth(dir: &TempDir, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.path().join(name);
    let mut args = vec!["synth", "--out", s(&out)];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

/// Header-keyed rows of a small CSV file.
fn csv_rows(text: &str) -> Vec<Vec<(String, String)>> {
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap().split(',').map(String::from).collect();
    lines
        .map(|l| header.iter().cloned().zip(l.split(',').map(String::from)).collect())
        .collect()
}

fn field<'a>(row: &'a [(String, String)], key: &str) -> &'a str {
    &row.iter().find(|(k, _)| k == key).unwrap_or_else(|| panic!("no column {key}")).1
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let dir = TempDir::new().unwrap();
    let a = synth(&dir, "a", &["--seed", "1"]);
    let b = synth(&dir, "b", &["--seed", "1"]);
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 5);
    for name in names {
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
    let c = synth(&dir, "c", &["--seed", "2"]);
    assert_ne!(fs::read(a.join("audio.aofl")).unwrap(), fs::read(c.join("audio.aofl")).unwrap());
}

#[test]
fn synth_rejects_strengths_over_one() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("ds");
    let res = aofl(&["synth", "--out", s(&out), "--shared-strength", "0.8", "--specific-strength", "0.3"]);
    assert_eq!(res.status.code(), Some(1));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("shared_strength + specific_strength"), "{err}");
    assert!(!out.exists());
}

#[test]
fn synth_default_has_four_classes() {
    let dir = TempDir::new().unwrap();
    let ds = synth(&dir, "ds", &[]);
    let manifest = read_json(&ds.join("manifest.json"));
    assert_eq!(manifest["num_classes"], 4);
    assert_eq!(manifest["d"], 16);
    assert_eq!(manifest["class_names"].as_array().unwrap().len(), 4);
    assert_eq!(manifest["conversations"].as_array().unwrap().len(), 100);
}

#[test]
fn train_without_data_fails_cleanly() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run");
    let res = aofl(&["train", "--data", s(&dir.path().join("missing")), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!out.exists());
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn train_without_data_leaves_existing_out_untouched() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run");
    fs::create_dir(&out).unwrap();
    fs::write(out.join("keep.txt"), "x").unwrap();
    let res = aofl(&["train", "--data", s(&dir.path().join("missing")), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
    let names: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, vec![std::ffi::OsString::from("keep.txt")]);
}

#[test]
fn flags_override_config_file() {
    let dir = TempDir::new().unwrap();
    let ds = synth(&dir, "ds", &["--num-conversations", "20"]);
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"epochs": 3, "warmup_epochs": 2, "beta": 0.5}"#).unwrap();
    let out = dir.path().join("run");
    ok(&["train", "--data", s(&ds), "--out", s(&out), "--config", s(&cfg), "--warmup-epochs", "0"]);
    let resolved = read_json(&out.join("resolved_config.json"));
    assert_eq!(resolved["warmup_epochs"], 0);
    assert_eq!(resolved["epochs"], 3);
    assert_eq!(resolved["beta"], 0.5);
    assert_eq!(resolved["d"], 16);
    assert_eq!(resolved["num_classes"], 4);
    for name in ["checkpoint.aofl", "history.csv", "summary.json"] {
        assert!(out.join(name).is_file(), "{name}");
    }
    let history = fs::read_to_string(out.join("history.csv")).unwrap();
    let rows = csv_rows(&history);
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| field(r, "warmup") == "false"));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let ds = synth(&dir, "ds", &["--num-conversations", "10"]);
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"epoch": 3}"#).unwrap();
    let out = dir.path().join("run");
    let res = aofl(&["train", "--data", s(&ds), "--out", s(&out), "--config", s(&cfg)]);
    assert_eq!(res.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn bad_flags_exit_with_usage_code() {
    assert_eq!(aofl(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(aofl(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(aofl(&["--help"]).status.code(), Some(0));
}

#[test]
fn warmup_longer_than_training_is_rejected() {
    let dir = TempDir::new().unwrap();
    let ds = synth(&dir, "ds", &["--num-conversations", "10"]);
    let res = aofl(&[
        "train", "--data", s(&ds), "--out", s(&dir.path().join("run")), "--epochs", "2", "--warmup-epochs", "3",
    ]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("warmup_epochs"));
}

#[test]
fn divergence_exits_with_code_three() {
    let dir = TempDir::new().unwrap();
    let ds = synth(&dir, "ds", &["--num-conversations", "20"]);
    let out = dir.path().join("run");
    let res = aofl(&[
        "train", "--data", s(&ds), "--out", s(&out), "--learning-rate", "1e200", "--warmup-epochs", "0",
    ]);
    assert_eq!(res.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&res.stderr).contains("diverged"));
    assert!(!out.exists());
}

#[test]
fn eval_on_noiseless_training_split_is_perfect() {
    let dir = TempDir::new().unwrap();
    let ds = synth(&dir, "ds", &["--noise-std", "0"]);
    let run = dir.path().join("run");
    ok(&["train", "--data", s(&ds), "--out", s(&run)]);
    let ev = dir.path().join("eval");
    ok(&["eval", "--checkpoint", s(&run.join("checkpoint.aofl")), "--data", s(&ds), "--part", "train", "--out", s(&ev)]);
    let report = read_json(&ev.join("eval.json"));
    assert_eq!(report["accuracy"], 1.0);
    assert_eq!(report["weighted_f1"], 1.0);
    // Picked up from beside the checkpoint.
    assert_eq!(read_json(&ev.join("resolved_config.json")), read_json(&run.join("resolved_config.json")));
    let confusion = fs::read_to_string(ev.join("confusion.csv")).unwrap();
    assert_eq!(confusion.lines().count(), 5);

    let an = dir.path().join("angles");
    ok(&["angles", "--checkpoint", s(&run.join("checkpoint.aofl")), "--data", s(&ds), "--part", "all", "--out", s(&an)]);
    let rows = csv_rows(&fs::read_to_string(an.join("angles.csv")).unwrap());
    assert_eq!(rows.len(), 800);
    for row in &rows {
        for m in ["audio", "text", "visual"] {
            let theta: f64 = field(row, &format!("theta_{m}")).parse().unwrap();
            assert!((0.0..=180.0).contains(&theta));
        }
    }
    let projection = fs::read_to_string(an.join("projection.csv")).unwrap();
    assert_eq!(projection.lines().count(), 1 + 800 * 3 * 2);
}

#[test]
fn eval_rejects_mismatched_dataset() {
    let dir = TempDir::new().unwrap();
    let ds = synth(&dir, "ds", &["--num-conversations", "10"]);
    let narrow = synth(&dir, "narrow", &["--num-conversations", "10", "--d", "8"]);
    let run = dir.path().join("run");
    ok(&["train", "--data", s(&ds), "--out", s(&run), "--epochs", "1", "--warmup-epochs", "1"]);
    let ev = dir.path().join("eval");
    let res = aofl(&["eval", "--checkpoint", s(&run.join("checkpoint.aofl")), "--data", s(&narrow), "--out", s(&ev)]);
    assert_eq!(res.status.code(), Some(2));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("checkpoint") && err.contains("d = 16"), "{err}");
    assert!(err.contains("narrow") && err.contains("d = 8"), "{err}");
    assert!(!ev.exists());
}

/// Independent tally of every weight and bias in the architecture.
fn expected_params(d: usize, layers: usize, d_ff: usize, d_c: usize, k: usize) -> usize {
    let linear = |i: usize, o: usize| i * o + o;
    let encoder = linear(d, d) + linear(d, d);
    let attention = 4 * linear(d, d) + linear(d, d_ff) + linear(d_ff, d);
    4 * encoder + linear(2 * d, 1) + 3 * layers * attention + linear(6 * d, d_c) + linear(d_c, d_c) + linear(d_c, k)
}

#[test]
fn inspect_reports_closed_form_count() {
    let dir = TempDir::new().unwrap();
    let ds = synth(&dir, "ds", &["--num-conversations", "10", "--d", "8", "--num-classes", "3"]);
    let run = dir.path().join("run");
    ok(&[
        "train", "--data", s(&ds), "--out", s(&run), "--epochs", "0", "--warmup-epochs", "0", "--layers", "1",
        "--d-ff", "12", "--d-c", "10",
    ]);
    let text = ok(&["inspect", s(&run.join("checkpoint.aofl"))]);
    let value = |key: &str| -> usize {
        text.lines()
            .find_map(|l| l.strip_prefix(key))
            .unwrap_or_else(|| panic!("no {key} in {text}"))
            .trim()
            .parse()
            .unwrap()
    };
    assert_eq!(value("d "), 8);
    assert_eq!(value("layers "), 1);
    assert_eq!(value("num_classes "), 3);
    assert_eq!(value("parameters "), expected_params(8, 1, 12, 10, 3));
}

#[test]
fn inspect_rejects_non_checkpoint() {
    let dir = TempDir::new().unwrap();
    let bogus = dir.path().join("x.aofl");
    fs::write(&bogus, b"not a checkpoint at all, just some bytes").unwrap();
    assert_eq!(aofl(&["inspect", s(&bogus)]).status.code(), Some(2));
}

#[test]
fn single_variant_ablation_matches_train_and_eval() {
    let dir = TempDir::new().unwrap();
    let ds = synth(&dir, "ds", &["--num-conversations", "30"]);
    let ab = dir.path().join("ablate");
    let table = ok(&["ablate", "--data", s(&ds), "--out", s(&ab), "--variants", "full", "--seeds", "1", "--epochs", "4", "--warmup-epochs", "2"]);
    assert!(table.contains("AO-FL"));
    for name in ["ablation.csv", "ablation_runs.csv", "ablation.txt", "resolved_config.json"] {
        assert!(ab.join(name).is_file(), "{name}");
    }
    let rows = csv_rows(&fs::read_to_string(ab.join("ablation.csv")).unwrap());
    assert_eq!(rows.len(), 1);
    let row = &rows[0];
    assert_eq!(field(row, "runs_ok"), "1");

    let run = dir.path().join("run");
    ok(&["train", "--data", s(&ds), "--out", s(&run), "--epochs", "4", "--warmup-epochs", "2"]);
    let ev = dir.path().join("eval");
    ok(&["eval", "--checkpoint", s(&run.join("checkpoint.aofl")), "--data", s(&ds), "--out", s(&ev)]);
    let report = read_json(&ev.join("eval.json"));
    let close = |col: &str, v: &serde_json::Value| {
        let a: f64 = field(row, col).parse().unwrap();
        let b = v.as_f64().unwrap();
        assert!((a - b).abs() < 1e-12, "{col}: {a} vs {b}");
    };
    close("accuracy_mean", &report["accuracy"]);
    close("weighted_f1_mean", &report["weighted_f1"]);
    close("cos_phi", &report["angles"]["cos_phi_mean"]);
    close("abs_cos_theta", &report["angles"]["abs_cos_theta_mean"]);
}
