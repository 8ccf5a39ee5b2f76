use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cardiofair"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn err_json(out: &Output) -> Value {
    assert!(!out.status.success());
    serde_json::from_slice(&out.stderr).expect("stderr is JSON")
}

const SPEC: &str = r#"
seed = 7
[train]
A = 4
B = 2
[internal]
A = 3
B = 3
[external]
A = 2
B = 2
"#;

fn experiment(name: &str, strategy: &str, cropping: &str, extra: &str) -> String {
    format!(
        r#"
[[experiments]]
name = "{name}"
data = {{ dir = "data" }}
strategy = "{strategy}"
cropping = "{cropping}"
seeds = [1]
widths = [2, 4]
{extra}
[experiments.train]
iterations = 2
batch_size = 2
"#
    )
}

#[test]
fn full_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("spec.toml"), SPEC).unwrap();
    let summary = ok_json(&run(dir, &["gen-data", "--spec", "spec.toml", "--out", "data"]));
    assert_eq!(summary["counts"]["train"]["A"], 4);
    assert!(dir.join("data/manifest.csv").exists());

    let config = [
        experiment("base", "baseline", "none", ""),
        experiment("crop", "baseline", "gt_crop", ""),
        experiment(
            "casc",
            "baseline",
            "cascaded",
            "stage1_from = \"runs/base\"\nstage2_from = \"runs/crop\"",
        ),
    ]
    .concat();
    std::fs::write(dir.join("matrix.toml"), config).unwrap();
    let summary = ok_json(&run(dir, &["train", "--config", "matrix.toml", "--out", "runs"]));
    assert_eq!(summary["experiments"].as_array().unwrap().len(), 3);
    for split in ["internal", "external"] {
        assert!(dir.join("runs/base/seed-1").join(split).join("fairness_report.json").exists());
    }
    assert!(dir.join("runs/casc/seed-1/internal/scores.csv").exists());

    let eval = ok_json(&run(
        dir,
        &[
            "eval",
            "--checkpoint",
            "runs/base/seed-1/checkpoint",
            "--data",
            "data",
            "--split",
            "internal",
            "--out",
            "eval",
        ],
    ));
    assert_eq!(eval["report"]["majority"], "A");
    let persisted: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("runs/base/seed-1/internal/fairness_report.json")).unwrap())
            .unwrap();
    assert_eq!(eval["report"], persisted);

    let rep = ok_json(&run(
        dir,
        &["report", "--in", "runs/base", "runs/crop", "runs/casc", "--out", "report"],
    ));
    assert_eq!(rep["tables_md"].as_array().unwrap().len(), 2);
    let table = std::fs::read_to_string(dir.join("report/table_internal.md")).unwrap();
    assert!(table.contains("base A") && table.contains("casc B"));
    assert!(dir.join("report/dsc_external.svg").exists());

    std::fs::write(dir.join("over.toml"), experiment("over", "oversample", "none", "")
            .replace("[[experiments]]", "")
            .replace("[experiments.train]", "[train]"))
        .unwrap();
    let sweep = ok_json(&run(
        dir,
        &[
            "sweep",
            "--config",
            "over.toml",
            "--axis",
            "oversampling_level",
            "--values",
            "0,0.5,1",
            "--out",
            "sweep",
        ],
    ));
    let xs: Vec<f64> = sweep["points"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["value"].as_f64().unwrap())
        .collect();
    assert_eq!(xs, [0.0, 0.5, 1.0]);
    assert!(dir.join("sweep/median_dsc_vs_axis.svg").exists());
}

#[test]
fn failures_emit_error_json() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("exp.toml"), experiment("x", "baseline", "none", "")).unwrap();
    let e = err_json(&run(dir, &["train", "--config", "exp.toml", "--out", "runs"]));
    assert_eq!(e["error"], "missing_dataset");

    let e = err_json(&run(
        dir,
        &["eval", "--checkpoint", "nope", "--data", "nope", "--split", "internal", "--out", "o"],
    ));
    assert_eq!(e["error"], "missing_dataset");

    std::fs::write(dir.join("bad.toml"), experiment("x", "group_dro+dice", "none", "")).unwrap();
    let e = err_json(&run(dir, &["train", "--config", "bad.toml", "--out", "runs"]));
    assert!(e["message"].as_str().unwrap().contains("group_dro+dice"));

    std::fs::write(dir.join("typo.toml"), experiment("x", "baseline", "none", "seed = [1]")).unwrap();
    let e = err_json(&run(dir, &["train", "--config", "typo.toml", "--out", "runs"]));
    assert_eq!(e["error"], "invalid_config");

    let e = err_json(&run(dir, &["report", "--in", "missing", "--out", "r"]));
    assert_eq!(e["error"], "io");

    let out = run(dir, &["sweep", "--config", "exp.toml", "--axis", "sideways", "--values", "1", "--out", "s"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(err_json(&out)["error"], "usage");
}

#[test]
fn missing_checkpoint_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("spec.toml"), SPEC).unwrap();
    ok_json(&run(dir, &["gen-data", "--spec", "spec.toml", "--out", "data"]));
    let e = err_json(&run(
        dir,
        &["eval", "--checkpoint", "none", "--data", "data", "--split", "internal", "--out", "o"],
    ));
    assert_eq!(e["error"], "missing_checkpoint");
    let casc = experiment("c", "baseline", "cascaded", "stage1_from = \"absent\"");
    std::fs::write(dir.join("c.toml"), casc).unwrap();
    let e = err_json(&run(dir, &["train", "--config", "c.toml", "--out", "runs"]));
    assert_eq!(e["error"], "missing_checkpoint");
}
