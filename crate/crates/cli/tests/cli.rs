use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use sindex::simulation::{gen_dataset, LawKind};
use sindex::{Direction, ModelSpec, PredictorLaw};

fn sindex(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sindex"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn write_data(dir: &Path, n: usize) -> PathBuf {
    let law = PredictorLaw::new(LawKind::Gaussian, 3);
    let beta = Direction::normalized(&[1.0, -2.0, 0.5]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data = gen_dataset(&ModelSpec::gaussian_linear(), &law, &beta, n, &mut rng).unwrap();
    let path = dir.join("data.csv");
    data.write_csv(fs::File::create(&path).unwrap()).unwrap();
    path
}

fn json(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).expect("valid JSON")
}

fn norm(v: &Value) -> f64 {
    v.as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap().powi(2))
        .sum::<f64>()
        .sqrt()
}

#[test]
fn fit_writes_unit_norm_direction() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), 800);
    let out = dir.path().join("fit.json");
    let res = sindex(&["fit", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let report = json(&fs::read(&out).unwrap());
    assert!((norm(&report["beta_hat"]) - 1.0).abs() < 1e-12);
    assert!((norm(&report["beta_hat_original"]) - 1.0).abs() < 1e-12);
    for key in ["beta_init", "std_errors", "info_eigenvalues", "trim_fraction", "config", "seed"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn fit_to_stdout_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), 300);
    let args = ["fit", "--data", data.to_str().unwrap(), "--seed", "5", "--no-split"];
    let a = sindex(&args);
    let b = sindex(&args);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(json(&a.stdout)["config"]["use_sample_splitting"], Value::Bool(false));
}

#[test]
fn fit_missing_file_is_input_error() {
    let res = sindex(&["fit", "--data", "/nonexistent/data.csv"]);
    assert_eq!(code(&res), 2);
    assert!(!res.stderr.is_empty());
}

#[test]
fn fit_single_predictor_is_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("one.csv");
    let mut text = String::from("x1,y\n");
    for i in 0..20 {
        text.push_str(&format!("{i},{}\n", 2 * i));
    }
    fs::write(&path, text).unwrap();
    let res = sindex(&["fit", "--data", path.to_str().unwrap()]);
    assert_eq!(code(&res), 2);
    assert!(String::from_utf8_lossy(&res.stderr).contains("row 1"));
}

#[test]
fn fit_constant_response_is_estimation_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flat.csv");
    let mut text = String::from("x1,x2,y\n");
    for i in 0..40 {
        text.push_str(&format!("{},{},1\n", (i * 7 % 11) as f64, (i * 5 % 13) as f64));
    }
    fs::write(&path, text).unwrap();
    let res = sindex(&["fit", "--data", path.to_str().unwrap()]);
    assert_eq!(code(&res), 3, "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn simulate_bundled_config_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = configs().join("quick.json");
    let res = sindex(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let csv = fs::read_to_string(out.join("mc_report.csv")).unwrap();
    assert!(csv.starts_with("estimator,n,statistic,value\n"));
    let report = json(&fs::read(out.join("mc_report.json")).unwrap());
    assert_eq!(report["cells"].as_array().unwrap().len(), 8);
    let table = String::from_utf8_lossy(&res.stdout);
    assert!(table.contains("median_angle") && table.contains("adaptive"));
}

#[test]
fn simulate_is_byte_identical_across_runs_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("quick.json");
    let mut csvs = Vec::new();
    for (k, threads) in ["1", "4", "1"].iter().enumerate() {
        let out = dir.path().join(format!("run{k}"));
        let res = sindex(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--threads",
            threads,
            "--seed",
            "99",
        ]);
        assert_eq!(code(&res), 0);
        csvs.push(fs::read(out.join("mc_report.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    assert_eq!(csvs[0], csvs[2]);
}

#[test]
fn simulate_rejects_every_invalid_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(
        &cfg,
        r#"{"model": {"link": "identity", "error": "gaussian", "sigma_or_scale": -1.0},
            "law": {"kind": "gaussian", "p": 3},
            "n_grid": [500], "replications": 1}"#,
    )
    .unwrap();
    let res = sindex(&["simulate", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&res), 2);
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("replications"), "{err}");
    assert!(err.contains("sigma_or_scale"), "{err}");
}

#[test]
fn simulate_rejects_unknown_fields() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("typo.json");
    fs::write(
        &cfg,
        r#"{"model": {"link": "identity", "error": "gaussian", "sigma_or_scale": 1.0},
            "law": {"kind": "gaussian", "p": 3},
            "n_grid": [500], "replications": 5, "replicates": 5}"#,
    )
    .unwrap();
    let res = sindex(&["simulate", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&res), 2);
}

fn lemma1(args: &[&str]) -> (i32, Value) {
    let mut all = vec!["check-lemma1", "--n-mc", "200000"];
    all.extend_from_slice(args);
    let res = sindex(&all);
    let v = if res.stdout.is_empty() { Value::Null } else { json(&res.stdout) };
    (code(&res), v)
}

#[test]
fn lemma1_constant_kappa_passes() {
    let (c, v) = lemma1(&["--kappa", "constant"]);
    assert_eq!(c, 0);
    assert!(v["ratio"].as_f64().unwrap() <= 3.0, "{v}");
    assert!(v["mc_se"].as_f64().unwrap() > 0.0);
}

#[test]
fn lemma1_true_score_passes_for_each_model() {
    for model in ["identity", "sine", "cubic_smooth"] {
        let (c, v) = lemma1(&["--kappa", "true_score", "--model", model, "--seed", "3"]);
        assert_eq!(c, 0);
        assert!(v["ratio"].as_f64().unwrap() <= 3.0, "{model}: {v}");
    }
}

#[test]
fn lemma1_unknown_kappa_lists_names() {
    let res = sindex(&["check-lemma1", "--kappa", "banana"]);
    assert_eq!(code(&res), 2);
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("y_cubed") && err.contains("true_score"), "{err}");
}

#[test]
fn score_diag_single_point_grid_omits_slope() {
    let res = sindex(&["score-diag", "--n-grid", "400", "--replications", "2", "--eval-size", "500"]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let v = json(&res.stdout);
    assert!(v["slope"].is_null());
    assert_eq!(v["values"].as_array().unwrap().len(), 2);
}

#[test]
fn score_diag_full_trim_gives_information_trace() {
    // l̂ ≡ 0 leaves E[||x||^2 l^2] = E||x||^2 E[eps^2] = p for the gaussian-linear model
    let res = sindex(&[
        "score-diag",
        "--n-grid",
        "400",
        "--replications",
        "1",
        "--eval-size",
        "20000",
        "--trim-constant",
        "1e6",
    ]);
    assert_eq!(code(&res), 0);
    let v = json(&res.stdout);
    let value = v["values"][0][0].as_f64().unwrap();
    assert!((value - 3.0).abs() < 0.15, "{value}");
}

#[test]
fn score_diag_invalid_grid_is_input_error() {
    let res = sindex(&["score-diag", "--n-grid", "1000,500"]);
    assert_eq!(code(&res), 2);
    let res = sindex(&["score-diag", "--n-grid", "5"]);
    assert_eq!(code(&res), 2);
}
