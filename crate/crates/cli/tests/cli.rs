use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use imputeaudit_core::dataset::{write_csv, CsvSchema};
use imputeaudit_core::synthetic::{generate, SyntheticConfig};
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_imputeaudit"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Writes a small synthetic mixture: the dataset, the members and a label file.
fn fixture(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let d = generate(&SyntheticConfig {
        n_series: 40,
        n_members: 20,
        length: 192,
        noise_sd: 0.05,
        seed: 4,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let all = dir.join("all.csv");
    let members = dir.join("members.csv");
    let labels = dir.join("labels.csv");
    write_csv(&all, &d.records(), CsvSchema::Long).unwrap();
    write_csv(&members, &d.members(), CsvSchema::Long).unwrap();
    let mut text = String::from("id,label\n");
    for s in &d.series {
        text += &format!("{},{}\n", s.record.id, u8::from(s.member));
    }
    std::fs::write(&labels, text).unwrap();
    (all, members, labels)
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let out = run(&["mia", "--target", "builtin:interpolating", "--reference", "builtin:interpolating"]);
    assert_eq!(out.status.code(), Some(64));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--suspects"));
}

#[test]
fn bad_flag_values_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (all, _, _) = fixture(dir.path());
    for (flag, value) in [("--theta", "median:3"), ("--target", "builtin:oracle")] {
        let mut args = vec!["mia", "--target", "interpolating", "--reference", "interpolating", "--suspects", p(&all)];
        args.extend([flag, value, "--out", p(dir.path())]);
        assert_eq!(run(&args).status.code(), Some(64), "{flag} {value}");
    }
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_input_file_is_fatal() {
    let out = run(&["mia", "--target", "interpolating", "--reference", "interpolating", "--suspects", "/nonexistent.csv"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn mia_is_reproducible_and_writes_sidecars() {
    let dir = tempfile::tempdir().unwrap();
    let (all, members, labels) = fixture(dir.path());
    let outs: Vec<PathBuf> = (0..2)
        .map(|i| {
            let out = dir.path().join(format!("ok{i}"));
            let o = run(&[
                "mia",
                "--target",
                "builtin:memorizing",
                "--target-train",
                p(&members),
                "--reference",
                "builtin:interpolating",
                "--suspects",
                p(&all),
                "--labels",
                p(&labels),
                "--match-tolerance",
                "1e-9",
                "--seed",
                "9",
                "--workers",
                if i == 0 { "1" } else { "4" },
                "--out",
                p(&out),
            ]);
            assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
            out
        })
        .collect();
    for name in ["scores.csv", "roc_lbrm.csv", "roc_naive.csv"] {
        assert_eq!(
            std::fs::read(outs[0].join(name)).unwrap(),
            std::fs::read(outs[1].join(name)).unwrap(),
            "{name}"
        );
    }
    let report = json(outs[0].join("mia.json"));
    assert!(report["mia"]["auroc"].as_f64().unwrap() > 0.95);
    assert_eq!(report["n_flagged"], 10);
    assert!(outs[0].join("config.json").exists());
}

#[test]
fn aia_writes_windows_and_flags_degenerate_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (all, _, _) = fixture(dir.path());
    let out = dir.path().join("mem");
    let o = run(&["aia", "--model", "builtin:memorizing", "--data", p(&all), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(out.join("aia.json"));
    assert_eq!(report["aia_all"]["n_windows"], 40 * 8);
    assert_eq!(report["aia_all"]["precision_mean"], 1.0);
    let rows = std::fs::read_to_string(out.join("aia_windows.csv")).unwrap();
    assert_eq!(rows.lines().count(), 40 * 8 + 1);

    // a constant series leaves no peaks to predict or find
    let flat = dir.path().join("flat.csv");
    std::fs::write(&flat, "id,v0,v1,v2,v3,v4,v5,v6,v7,v8,v9,v10,v11,v12,v13,v14,v15,v16,v17,v18,v19,v20,v21,v22,v23\nf,1,1,1,1,1,1,1,1,1,1,1,1,1,1,1,1,1,1,1,1,1,1,1,1\n").unwrap();
    let out = dir.path().join("flat");
    let o = run(&["aia", "--model", "interpolating", "--data", p(&flat), "--schema", "wide", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!json(out.join("aia.json"))["degenerate"].as_array().unwrap().is_empty());
}

#[test]
fn pipeline_scratch_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let (all, _, _) = fixture(dir.path());
    let out = dir.path().join("pipe");
    let o = run(&[
        "pipeline",
        "--scenario",
        "scratch",
        "--data",
        p(&all),
        "--eval",
        "builtin:seasonal_mean:48",
        "--permutations",
        "500",
        "--out",
        p(&out),
    ]);
    assert!(matches!(o.status.code(), Some(0 | 2)), "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(out.join("report.json"));
    assert_eq!(report["scenario"], "scratch");
    assert_eq!(report["schema_version"], 1);
    assert!(report["aia_eval_all"].is_object());
    for name in report["sidecars"].as_array().unwrap() {
        assert!(out.join(name.as_str().unwrap()).exists(), "{name}");
    }

    let tables = dir.path().join("tables");
    let o = run(&["report", "--input", p(&out.join("report.json")), "--out", p(&tables)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let roc = std::fs::read_to_string(tables.join("roc_table.csv")).unwrap();
    assert!(roc.starts_with("curve,threshold,fpr,tpr\n"));
    assert!(roc.contains("lbrm,") && roc.contains("naive,"));
    assert!(tables.join("precision_table.csv").exists());
}

#[test]
fn pipeline_requires_data_for_split_scenarios() {
    assert_eq!(run(&["pipeline", "--scenario", "finetune"]).status.code(), Some(64));
}

#[test]
fn serve_answers_health_and_impute() {
    let mut child = bin()
        .args(["serve", "--imputer", "builtin:interpolating", "--port", "0", "--length", "5"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let url = line.trim().strip_prefix("listening on ").unwrap().to_string();

    let health: Value = reqwest::blocking::get(format!("{url}/health")).unwrap().json().unwrap();
    assert_eq!(health, serde_json::json!({"kind": "interpolating", "length": 5}));
    let resp: Value = reqwest::blocking::Client::new()
        .post(format!("{url}/impute"))
        .json(&serde_json::json!({"values": [0.0, null, null, 3.0, 4.0], "masks": [{"start": 1, "width": 2}]}))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(resp, serde_json::json!({"imputed": [0.0, 1.0, 2.0, 3.0, 4.0]}));
    child.kill().unwrap();
    child.wait().unwrap();
}

#[test]
fn remote_models_work_from_the_cli() {
    let mut child = bin()
        .args(["serve", "--imputer", "seasonal_mean:48", "--port", "0"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let url = line.trim().strip_prefix("listening on ").unwrap().to_string();

    let dir = tempfile::tempdir().unwrap();
    let (all, _, _) = fixture(dir.path());
    let local = dir.path().join("local");
    let remote = dir.path().join("remote");
    for (model, out) in [("builtin:seasonal_mean:48", &local), (url.as_str(), &remote)] {
        let o = run(&["aia", "--model", model, "--data", p(&all), "--out", p(out)]);
        assert!(matches!(o.status.code(), Some(0 | 2)), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(
        std::fs::read(local.join("aia_windows.csv")).unwrap(),
        std::fs::read(remote.join("aia_windows.csv")).unwrap()
    );
    child.kill().unwrap();
    child.wait().unwrap();
}
