//! End-to-end runs of the `aif` binary.

use std::path::Path;
use std::process::{Command, Output};

use aif::aif::compute_aif;
use aif::attack::NormOrder;
use aif::dataset::load_csv;
use aif::model::{fit, RegressionModel};
use serde_json::Value;

fn aif(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aif"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("train.csv");
    let out = aif(&[
        "generate",
        "--family",
        "gaussian-linear",
        "--n",
        "60",
        "--m",
        "2",
        "--sigma-xi",
        "0.1",
        "--beta1",
        "2,-3.4",
        "--seed",
        "4",
        "--out",
        path(&data),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    data
}

#[test]
fn fit_then_compute_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path());
    let theta_file = dir.path().join("theta.json");
    assert!(aif(&["fit", "--data", path(&data), "--out", path(&theta_file)])
        .status
        .success());
    let result = json(&aif(&[
        "compute",
        "--data",
        path(&data),
        "--p",
        "2",
        "--theta",
        path(&theta_file),
    ]));

    let d = load_csv(&data).unwrap();
    let model = RegressionModel::identity(2);
    let theta = fit(&model, &d).unwrap().theta;
    let expected = compute_aif(&model, &theta, &d, NormOrder::Two).unwrap().influence;
    let got: Vec<f64> = serde_json::from_value(result["influence"].clone()).unwrap();
    for k in 0..2 {
        assert!((got[k] - expected[k]).abs() < 1e-12);
    }
}

#[test]
fn sensitivity_robust_and_dro_succeed() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path());
    let s = json(&aif(&["sensitivity", "--data", path(&data), "--eps", "0.1"]));
    assert!(s["aif_plugin"]["value"].as_f64().unwrap() > 0.0);
    let r = json(&aif(&["robust", "--data", path(&data), "--eps", "0.05"]));
    assert!(r.is_object());
    let dro = json(&aif(&["dro", "--data", path(&data), "--u", "2"]));
    assert!((dro["factor"].as_f64().unwrap() - 60f64.powf(-0.5)).abs() < 1e-12);
    let k = json(&aif(&[
        "kernel",
        "--data",
        path(&data),
        "--kernel",
        "ntk",
        "--normalize",
    ]));
    assert!(k.is_object());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad_grid = aif(&["experiment", "dro-scaling", "--eps-grid", "0.01,0.1"]);
    assert_eq!(bad_grid.status.code(), Some(2));
    assert_eq!(aif(&["compute", "--p", "7x"]).status.code(), Some(2));

    let config = dir.path().join("bad.json");
    std::fs::write(&config, r#"{"dataset": {"colour": 3}}"#).unwrap();
    assert_eq!(
        aif(&["--config", path(&config), "experiment", "fig1-effectiveness"])
            .status
            .code(),
        Some(2)
    );

    let collinear = dir.path().join("collinear.csv");
    std::fs::write(&collinear, "x1,x2,y\n1,1,1\n2,2,3\n3,3,2\n").unwrap();
    let out = aif(&["compute", "--data", path(&collinear)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

/// The table with the runtime column blanked.
fn without_runtime(csv: &str) -> Vec<String> {
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|&h| h == "runtime_ms").unwrap();
    csv.lines()
        .map(|line| {
            let mut cells: Vec<&str> = line.split(',').collect();
            cells[col] = "";
            cells.join(",")
        })
        .collect()
}

#[test]
fn experiment_output_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("fig1.json");
    std::fs::write(
        &config,
        r#"{"experiment": {"name": "fig1-effectiveness", "eps_grid": [0.1, 0.05], "seeds": [3, 5]},
            "dataset": {"n": 80}}"#,
    )
    .unwrap();
    let mut tables = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("run{k}.csv"));
        let status = aif(&["--config", path(&config), "experiment", "--out", path(&out)]);
        assert!(
            status.status.success(),
            "{}",
            String::from_utf8_lossy(&status.stderr)
        );
        tables.push(std::fs::read_to_string(&out).unwrap());
    }
    assert_eq!(tables[0].lines().count(), 1 + 2 * 2);
    assert_eq!(without_runtime(&tables[0]), without_runtime(&tables[1]));

    let out = dir.path().join("dro.json");
    assert!(aif(&["experiment", "dro-scaling", "--out", path(&out)])
        .status
        .success());
    let table: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(table["summary"]["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(table["rows"].as_array().unwrap().len(), 3);
}
