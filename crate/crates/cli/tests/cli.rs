use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn cluda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cluda"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL: &[&str] = &[
    "--set",
    "synth.train_per_domain=80",
    "--set",
    "synth.val_per_domain=30",
    "--set",
    "synth.test_per_domain=40",
];

const QUICK_TRAIN: &[&str] = &[
    "--set",
    "max_steps=30",
    "--set",
    "eval_interval=10",
    "--set",
    "batch_size=16",
    "--set",
    "queue_size=64",
    "--set",
    "tcn.channels=8",
];

fn generate(dir: &Path, extra: &[&str]) {
    let mut args = vec!["generate", "--out", dir.to_str().unwrap()];
    args.extend(SMALL);
    args.extend(extra);
    let o = cluda(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let data_dir = format!("data_dir={}", data.display());
    let mut args = vec!["train", "--out", out.to_str().unwrap(), "--set", &data_dir];
    args.extend(QUICK_TRAIN);
    args.extend(extra);
    cluda(&args)
}

#[test]
fn generate_is_deterministic_and_complete() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    generate(&a, &["--seed", "4"]);
    generate(&b, &["--seed", "4"]);
    let mut names: Vec<String> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.iter().filter(|n| n.ends_with(".csv") && !n.contains("_labels")).count(), 6);
    assert!(names.contains(&"manifest.json".to_string()));
    // unlabeled target splits ship no label file
    assert!(!names.contains(&"target_train_labels.csv".to_string()));
    assert!(names.contains(&"target_test_labels.csv".to_string()));
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n}");
    }
    assert_eq!(json(&a.join("manifest.json"))["seed"], 4);
}

#[test]
fn train_evaluate_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, &[]);
    let (r1, r2) = (tmp.path().join("r1"), tmp.path().join("r2"));
    for dir in [&r1, &r2] {
        let o = train(&data, dir, &["--seed", "3"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["report.json", "checkpoint.bin"] {
        assert_eq!(fs::read(r1.join(f)).unwrap(), fs::read(r2.join(f)).unwrap(), "{f}");
    }
    // history matches apart from wall-clock timing
    let untimed = |dir: &Path| -> Vec<Value> {
        fs::read_to_string(dir.join("history.ndjson"))
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("wall_ms");
                v
            })
            .collect()
    };
    assert_eq!(untimed(&r1), untimed(&r2));
    let report = json(&r1.join("report.json"));
    for domain in ["source_test", "target_test"] {
        let m = report[domain].as_object().unwrap();
        let mut keys: Vec<&str> = m.keys().map(String::as_str).collect();
        keys.sort();
        assert_eq!(keys, ["auprc", "auroc", "n"]);
    }
    assert_eq!(report["seed"], 3);

    // the checkpoint re-scores its own validation split exactly
    let best = fs::read_to_string(r1.join("history.ndjson"))
        .unwrap()
        .lines()
        .filter_map(|l| serde_json::from_str::<Value>(l).unwrap()["val_metric"].as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let ck = r1.join("checkpoint.bin");
    let val = data.join("source_val.csv");
    let o = cluda(&["evaluate", "--checkpoint", ck.to_str().unwrap(), "--data", val.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!((metrics["auroc"].as_f64().unwrap() - best).abs() <= 1e-9);
    assert!((report["best_val_metric"].as_f64().unwrap() - best).abs() <= 1e-9);

    // task mismatch is a validation error
    let o = cluda(&[
        "evaluate",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--data",
        val.to_str().unwrap(),
        "--task",
        "ordinal-10",
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn resolved_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, &[]);
    let first = tmp.path().join("first");
    assert_eq!(code(&train(&data, &first, &["--set", "lambda_nncl=0"])), 0);
    let doc = first.join("config.txt");
    let second = tmp.path().join("second");
    let o = cluda(&["train", "--config", doc.to_str().unwrap(), "--out", second.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        fs::read(first.join("checkpoint.bin")).unwrap(),
        fs::read(second.join("checkpoint.bin")).unwrap()
    );
}

#[test]
fn baseline_semantics_via_set() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, &[]);
    let out = tmp.path().join("run");
    let o = train(
        &data,
        &out,
        &["--set", "lambda_cl=0", "--set", "lambda_nncl=0", "--set", "lambda_disc=0"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for line in fs::read_to_string(out.join("history.ndjson")).unwrap().lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        for k in ["loss_disc", "loss_cl_source", "loss_cl_target", "loss_nncl"] {
            assert_eq!(v[k], 0.0);
        }
        assert_eq!(v["loss_total"], v["loss_c"]);
    }
}

#[test]
fn ordinal_task_reports_kappa() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let freqs = format!("synth.class_freqs=[{}]", (0..10).map(|k| format!("{}", 0.05 + 0.01 * k as f64)).collect::<Vec<_>>().join(","));
    let levels = format!("synth.class_levels=[{}]", vec!["[0,0,0]"; 10].join(","));
    let amps = format!("synth.class_amplitudes=[{}]", vec!["1"; 10].join(","));
    let ordinal = ["--set", "synth.num_classes=10", "--set", &freqs, "--set", &levels, "--set", &amps];
    generate(&data, &ordinal);
    let out = tmp.path().join("run");
    let o = train(&data, &out, &["--set", "task=ordinal-10"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = json(&out.join("report.json"));
    let m = report["target_test"].as_object().unwrap();
    let mut keys: Vec<&str> = m.keys().map(String::as_str).collect();
    keys.sort();
    assert_eq!(keys, ["confusion_matrix", "kappa", "n"]);
}

#[test]
fn configuration_errors_are_listed_and_exit_1() {
    let o = cluda(&["train", "--set", "bogus=1", "--set", "momentum=2", "--set", "noequals"]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("noequals"), "{err}");
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.txt");
    fs::write(&cfg, "bogus = 1\nmomentum = 2\n").unwrap();
    let o = cluda(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("bogus") && err.contains("momentum"), "{err}");
    assert_eq!(code(&cluda(&["frobnicate"])), 1);
}

#[test]
fn missing_data_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = train(&tmp.path().join("nope"), &tmp.path().join("out"), &[]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn verify_passes_and_catches_a_flipped_reversal() {
    let o = cluda(&["verify", "--instances", "3"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let o = cluda(&["verify", "--instances", "3", "--break-reversal"]);
    assert_eq!(code(&o), 3);
    let failing: Vec<String> = stdout(&o)
        .lines()
        .filter(|l| l.starts_with("FAIL"))
        .map(str::to_string)
        .collect();
    assert_eq!(failing.len(), 1, "{failing:?}");
    assert!(failing[0].contains("reversal"));
}

#[test]
fn grid_runs_every_combination() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, &[]);
    let out = tmp.path().join("grid");
    let data_dir = format!("data_dir={}", data.display());
    let mut args = vec!["grid", "--out", out.to_str().unwrap(), "--set", &data_dir];
    args.extend(QUICK_TRAIN);
    args.extend(["--grid", "lambda_cl=0.05,0.1", "--grid", "lambda_disc=0.1"]);
    let o = Command::new(env!("CARGO_BIN_EXE_cluda"))
        .args(&args)
        .env("CLUDA_THREADS", "2")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let entries = json(&out.join("grid.json"));
    assert_eq!(entries.as_array().unwrap().len(), 2);
    assert!(out.join("run-000/report.json").exists() && out.join("run-001/report.json").exists());

    let o = Command::new(env!("CARGO_BIN_EXE_cluda"))
        .args(["grid", "--grid", "lambda_cl=0.1"])
        .env("CLUDA_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}
