use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_eslasso"));
    c.env_remove("ESLASSO_THREADS");
    c
}

fn run(args: &[&str], threads: Option<&str>) -> Output {
    let mut c = bin();
    c.args(args);
    if let Some(t) = threads {
        c.env("ESLASSO_THREADS", t);
    }
    c.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

/// Every output except the manifest, by file name.
fn data_outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let h = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect();
    (h, rows)
}

/// Location-scale data from a small linear congruential generator.
fn regression_csv(n: usize) -> String {
    let mut state: u64 = 42;
    let mut unif = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    };
    let mut out = String::from("y,x1,x2\n");
    for _ in 0..n {
        let (a, b) = (unif(), unif());
        // Box-Muller
        let e = (-2.0 * unif().ln()).sqrt() * (2.0 * std::f64::consts::PI * unif()).cos();
        let y = 1.0 + 2.0 * a - b + (0.5 + a) * e;
        out.push_str(&format!("{y},{a},{b}\n"));
    }
    out
}

const SIMULATE: &str = r#"{
  "simulation": {"t": 100, "d": 3, "degree": 2, "s0": 1, "tau": 0.1, "sigma_nu": 1.0,
                 "rho": 0.5, "theta": 0.15, "seed": 3, "cv": {"folds": 3, "points": 5, "min_ratio": 0.01}},
  "reps": 2
}"#;

#[test]
fn missing_config_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let o = run(&["simulate", "--config", "/nonexistent/cfg.json", "--out", out.to_str().unwrap()], None);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["simulate", "--out", out.to_str().unwrap()], None);
    assert_eq!(code(&o), 2);
}

#[test]
fn unknown_config_fields_are_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.json", r#"{"simulation": {"t": 100, "bogus": 1}, "reps": 1}"#);
    let o = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()], None);
    assert_eq!(code(&o), 2);
}

#[test]
fn simulate_smoke_and_manifest() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "sim.json", &SIMULATE.replace("\"reps\": 2", "\"reps\": 1"));
    let out = tmp.path().join("out");
    let o = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (h, rows) = read_csv(&out.join("summary.csv"));
    assert_eq!(h[0], "estimator");
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r[9] == "0"));
    let (_, recs) = read_csv(&out.join("records_penalized.csv"));
    assert_eq!(recs.len(), 1);
    let m: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "simulate");
    assert_eq!(m["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(m["config"]["simulation"]["seed"], 3);
    assert!(m["created"].as_str().unwrap().len() > 10);
}

#[test]
fn simulate_is_reproducible_across_threads() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "sim.json", SIMULATE);
    let mut outputs = Vec::new();
    for (i, threads) in ["1", "1", "3"].iter().enumerate() {
        let out = tmp.path().join(format!("o{i}"));
        let o = run(
            &["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "9"],
            Some(threads),
        );
        assert_eq!(code(&o), 0);
        outputs.push(data_outputs(&out));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
    // explicit flag wins over the environment
    let out = tmp.path().join("flag");
    let mut c = bin();
    c.env("ESLASSO_THREADS", "0")
        .args(["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .args(["--seed", "9", "--threads", "2"]);
    assert_eq!(code(&c.output().unwrap()), 0);
    assert_eq!(data_outputs(&out), outputs[0]);
}

#[test]
fn fit_writes_model_and_predictions() {
    let tmp = TempDir::new().unwrap();
    let data = write(tmp.path(), "d.csv", &regression_csv(300));
    let cfg = write(
        tmp.path(),
        "fit.json",
        r#"{"response": "y", "degree": 2, "tau": 0.1, "cv": {"folds": 3, "points": 8, "min_ratio": 0.001}}"#,
    );
    for model in ["quantile", "es"] {
        let out = tmp.path().join(model);
        let o = run(
            &[
                "fit", model, "--data", data.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--out",
                out.to_str().unwrap(),
            ],
            None,
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let fit: serde_json::Value = serde_json::from_slice(&fs::read(out.join("fit.json")).unwrap()).unwrap();
        assert_eq!(fit["columns"].as_array().unwrap().len(), 5);
        // 1 + |response|_inf >= 1, so this is the stricter form of the bound
        assert!(fit["quantile"]["certificate"].as_f64().unwrap() <= 1e-6);
        let (h, rows) = read_csv(&out.join("predictions.csv"));
        assert_eq!(rows.len(), 300);
        assert_eq!(h.len(), if model == "es" { 4 } else { 3 });
        assert!(out.join("cv_quantile.csv").exists());
        if model == "es" {
            assert!(out.join("cv_es.csv").exists());
            assert!(fit["es"]["kkt_violation"].as_f64().unwrap() <= 1e-6);
        }
    }
}

#[test]
fn lambda_at_its_maximum_zeroes_the_es_fit() {
    let tmp = TempDir::new().unwrap();
    let data = write(tmp.path(), "d.csv", &regression_csv(200));
    let cfg = write(tmp.path(), "fit.json", r#"{"response": "y", "tau": 0.1, "nu": 0.0, "lambda": "max"}"#);
    let out = tmp.path().join("o");
    let o = run(
        &["fit", "es", "--data", data.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()],
        None,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let fit: serde_json::Value = serde_json::from_slice(&fs::read(out.join("fit.json")).unwrap()).unwrap();
    assert!(fit["es"]["coefficients"].as_array().unwrap().iter().all(|c| c.as_f64() == Some(0.0)));
    assert!(!out.join("cv_es.csv").exists());
}

#[test]
fn bad_csv_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "fit.json", r#"{"response": "y", "tau": 0.1, "nu": 0.1}"#);
    let out = tmp.path().join("o");
    for body in ["y,x1\n1,2\n3,abc\n4,5\n", "z,x1\n1,2\n3,4\n", "y,x1\n1,2,3\n"] {
        let data = write(tmp.path(), "bad.csv", body);
        let o = run(
            &["fit", "quantile", "--data", data.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()],
            None,
        );
        assert_eq!(code(&o), 2, "{body}");
    }
}

#[test]
fn cv_writes_tables_and_selection() {
    let tmp = TempDir::new().unwrap();
    let data = write(tmp.path(), "d.csv", &regression_csv(240));
    let cfg = write(
        tmp.path(),
        "cv.json",
        r#"{"response": "y", "tau": 0.25, "nu": 0.5, "cv": {"folds": 4, "points": 6, "min_ratio": 0.01}}"#,
    );
    let out = tmp.path().join("o");
    let o = run(
        &["cv", "es", "--data", data.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()],
        None,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (h, rows) = read_csv(&out.join("cv_es.csv"));
    assert_eq!(h, vec!["penalty", "fold1", "fold2", "fold3", "fold4", "mean"]);
    assert_eq!(rows.len(), 6);
    assert!(out.join("cv_quantile.csv").exists());
    assert!(out.join("selection.json").exists());
}

const COES: &str = r#"{
  "run": {"tau": 0.1, "degrees": [1, 3], "train": 250, "test": 150,
          "penalty": {"cv": {"folds": 3, "points": 6, "min_ratio": 0.001}}},
  "synthetic": {"periods": 400, "state_dim": 3, "degree": 3, "s0": 2, "sigma": 1.0, "rho": 0.5,
                "theta": 0.15, "industry_loading": 0.5, "seed": 4}
}"#;

#[test]
fn coes_synthetic_runs_every_degree_deterministically() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "coes.json", COES);
    let mut outputs = Vec::new();
    for (i, t) in ["1", "4"].iter().enumerate() {
        let out = tmp.path().join(format!("o{i}"));
        let o = run(&["coes", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], Some(t));
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push(data_outputs(&out));
    }
    assert_eq!(outputs[0], outputs[1]);
    let out = tmp.path().join("o0");
    let (_, rows) = read_csv(&out.join("report.csv"));
    assert_eq!(rows.len(), 2 * 5);
    for k in [1, 3] {
        let (h, rows) = read_csv(&out.join(format!("predictions_k{k}.csv")));
        assert_eq!(h.len(), 8);
        assert_eq!(rows.len(), 150);
    }
}

#[test]
fn coes_reads_a_panel_file() {
    let tmp = TempDir::new().unwrap();
    let mut body = String::from("date,mkt,ind,z1,z2\n");
    let mut s: u64 = 7;
    let mut u = || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
        ((s >> 11) as f64) / (1u64 << 53) as f64 - 0.5
    };
    for t in 0..301 {
        let (z1, z2, e) = (u(), u(), u());
        let ind = z1 + e;
        body.push_str(&format!("{},{},{ind},{z1},{z2}\n", t + 1, 0.5 * ind + u()));
    }
    let data = write(tmp.path(), "panel.csv", &body);
    let cfg = write(
        tmp.path(),
        "coes.json",
        r#"{"run": {"tau": 0.1, "degrees": [1], "train": 200, "test": 100, "penalty": "unpenalized"},
            "columns": {"date": "date", "market": "mkt", "industry": "ind", "state": ["z1", "z2"]}}"#,
    );
    let out = tmp.path().join("o");
    let o = run(
        &["coes", "--data", data.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()],
        None,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (_, rows) = read_csv(&out.join("predictions_k1.csv"));
    assert_eq!(rows.len(), 100);
    assert_eq!(rows[0][0], "202");

    let bad = write(
        tmp.path(),
        "bad.json",
        r#"{"run": {"tau": 0.1, "degrees": [1], "train": 200, "test": 100, "penalty": "unpenalized"},
            "columns": {"date": "date", "market": "mkt", "industry": "missing", "state": ["z1"]}}"#,
    );
    let o = run(
        &["coes", "--data", data.to_str().unwrap(), "--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap()],
        None,
    );
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing"));
}

const TAIL: &str = r#"{"rho": 0.5, "p": 4, "t": 400, "reps": 800, "seed": 2,
  "u_grid": [0.02, 0.04, 0.06, 0.08, 0.1, 0.12, 0.14, 0.16, 0.18, 0.2]}"#;

#[test]
fn tailbound_output_is_monotone_and_reproducible() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "tail.json", TAIL);
    let mut outputs = Vec::new();
    for (i, t) in ["1", "3"].iter().enumerate() {
        let out = tmp.path().join(format!("o{i}"));
        let o = run(&["tailbound", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], Some(t));
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push(data_outputs(&out));
    }
    assert_eq!(outputs[0], outputs[1]);
    let (h, rows) = read_csv(&tmp.path().join("o0/tail.csv"));
    let col = |name: &str| h.iter().position(|x| x == name).unwrap();
    let smoothed: Vec<f64> = rows.iter().map(|r| r[col("smoothed")].parse().unwrap()).collect();
    assert!(smoothed.windows(2).all(|w| w[1] <= w[0]));
    for r in &rows {
        if r[col("role")] == "validate" {
            assert!(r[col("bound")].parse::<f64>().unwrap() >= r[col("empirical")].parse::<f64>().unwrap());
        }
    }
}

#[test]
fn tailbound_empty_grid_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "tail.json", r#"{"rho": 0.5, "p": 4, "t": 400, "reps": 10, "seed": 2, "u_grid": []}"#);
    let o = run(&["tailbound", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()], None);
    assert_eq!(code(&o), 2);
}

#[test]
fn fit_and_cv_are_reproducible_across_threads() {
    let tmp = TempDir::new().unwrap();
    let data = write(tmp.path(), "d.csv", &regression_csv(200));
    let cfg = write(
        tmp.path(),
        "fit.json",
        r#"{"response": "y", "degree": 3, "tau": 0.1, "cv": {"folds": 4, "points": 6, "min_ratio": 0.001}}"#,
    );
    for cmd in ["fit", "cv"] {
        let mut outputs = Vec::new();
        for (i, t) in ["1", "1", "4"].iter().enumerate() {
            let out = tmp.path().join(format!("{cmd}{i}"));
            let o = run(
                &[cmd, "es", "--data", data.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()],
                Some(t),
            );
            assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
            outputs.push(data_outputs(&out));
        }
        assert!(!outputs[0].is_empty());
        assert_eq!(outputs[0], outputs[1]);
        assert_eq!(outputs[0], outputs[2]);
    }
}
