use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sgp(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sgp"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn gen_fit_predict_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = sgp(&["gen-data", "snelson-like", "--n", "30", "--seed", "4", "--out", "data"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    fs::write(d.join("train.json"), r#"{"method": "sgpr_new", "num_inducing": 5, "iterations": 50}"#).unwrap();
    let o = sgp(
        &["fit", "--data", "data/snelson_like.csv", "--config", "train.json", "--out", "model"],
        d,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report["bound"].as_f64().unwrap().is_finite());
    let trace = fs::read_to_string(d.join("model/trace.csv")).unwrap();
    assert!(trace.starts_with("step,bound,noise_var"));

    let o = sgp(
        &[
            "predict",
            "--model",
            "model/model.json",
            "--inputs",
            "data/snelson_like.csv",
            "--drop-column",
            "y",
            "--out",
            "pred",
        ],
        d,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let pred = fs::read_to_string(d.join("pred/predictions.csv")).unwrap();
    assert_eq!(pred.lines().count(), 31);
    assert_eq!(pred.lines().next().unwrap(), "x0,mean,var,latent_mean,latent_var");
}

#[test]
fn compare_bounds_prints_ordered_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&sgp(&["gen-data", "synthetic", "--n", "60", "--dim", "2", "--out", "."], d)), 0);
    let o = sgp(
        &["compare-bounds", "--data", "synthetic.csv", "--num-inducing", "6", "--noise-var", "0.05"],
        d,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let b = |k: &str| v[k]["bound"].as_f64().unwrap();
    assert!(b("sgpr") <= b("sgpr_artemev") + 1e-9);
    assert!(b("sgpr_artemev") <= b("sgpr_new") + 1e-9);
    assert!(b("sgpr_new") <= v["exact"].as_f64().unwrap() + 1e-9);
}

#[test]
fn experiment_subcommand_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("exp.json"),
        r#"{
            "name": "smoke",
            "dataset": {"kind": "synthetic", "n": 40, "dim": 1, "noise_var": 0.1},
            "repeats": 2,
            "methods": [
                {"method": "exact", "iterations": 30},
                {"method": "sgpr_new", "num_inducing": 5, "iterations": 30}
            ]
        }"#,
    )
    .unwrap();
    let o = sgp(&["experiment", "--config", "exp.json", "--out", "res"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["repeat_000.json", "repeat_001.json", "summary.csv", "summary.json", "timings.csv"] {
        assert!(d.join("res").join(f).exists(), "{f}");
    }
    assert!(d.join("res/v_hist/sgpr_new_r001.csv").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // I/O: missing data file
    assert_eq!(code(&sgp(&["fit", "--data", "missing.csv"], d)), 3);
    // config: unknown method, unknown subcommand, missing experiment config
    assert_eq!(code(&sgp(&["fit", "--data", "x.csv", "--method", "nope"], d)), 1);
    assert_eq!(code(&sgp(&["frobnicate"], d)), 1);
    assert_eq!(code(&sgp(&["experiment"], d)), 1);
    fs::write(d.join("bad.json"), r#"{"method": "sgpr", "typo_field": 3}"#).unwrap();
    assert_eq!(code(&sgp(&["gen-data", "poisson-toy", "--out", "."], d)), 0);
    assert_eq!(
        code(&sgp(&["fit", "--data", "poisson_toy.csv", "--config", "bad.json"], d)),
        1
    );
    // config: more inducing points than rows
    fs::write(d.join("big.json"), r#"{"method": "sgpr", "num_inducing": 500}"#).unwrap();
    assert_eq!(
        code(&sgp(&["fit", "--data", "poisson_toy.csv", "--config", "big.json"], d)),
        1
    );
    assert_eq!(code(&sgp(&["--help"], d)), 0);
}
