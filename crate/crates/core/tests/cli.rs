use std::path::Path;
use std::process::{Command, Output};

fn tsk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsk")).args(args).env_remove("TSK_THREADS").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

const RATES: &str = r#"{
  "meta": {"family": "hard_margin", "dim": 1, "c": 2.0, "s": 0.5, "sigma": 0.25, "p_plus": 0.5, "r": 1.0},
  "base_kernel": {"family": "gaussian", "width": 2.0, "dim": 1},
  "hilbert_kernel": {"family": "gaussian", "width": 1.0},
  "schedule": {"kind": "thm55", "alpha": 1.0, "mu": 0.25},
  "n_grid": [8, 16],
  "test_bags": 200
}"#;

#[test]
fn unknown_subcommand_prints_usage_and_exits_2() {
    let o = tsk(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn help_exits_0() {
    let o = tsk(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in ["rates", "kme-coverage", "whitenoise-verify", "noise-exponent", "approx-error", "train", "predict"] {
        assert!(text.contains(sub), "help lacks {sub}");
    }
}

#[test]
fn missing_config_names_the_path() {
    let o = tsk(&["rates", "--config", "/definitely/not/here.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/definitely/not/here.json"));
}

#[test]
fn malformed_and_invalid_configs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad_json = write(dir.path(), "a.json", "{ not json");
    assert_eq!(tsk(&["rates", "--config", &bad_json]).status.code(), Some(2));
    let unknown_field = write(dir.path(), "b.json", &RATES.replace("\"test_bags\"", "\"test_bagz\""));
    assert_eq!(tsk(&["rates", "--config", &unknown_field]).status.code(), Some(2));
    let bad_margin = write(dir.path(), "c.json", &RATES.replace("\"r\": 1.0", "\"r\": 3.0"));
    let o = tsk(&["rates", "--config", &bad_margin]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("0 < r < c"), "{}", stderr(&o));
}

#[test]
fn rates_happy_path_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "cfg.json", RATES);
    let out = dir.path().join("report.csv");
    let summary = dir.path().join("summary.json");
    let o = tsk(&[
        "rates",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "42",
        "--summary",
        summary.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(&out).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("N,M_N,lambda_N,gamma_N,replicate,seed,"));
    assert_eq!(lines.count(), 2);
    let s: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&summary).unwrap()).unwrap();
    assert_eq!(s["failed_rows"], 0);
}

#[test]
fn seed_flag_changes_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "cfg.json", RATES);
    let run = |seed: &str| {
        let out = dir.path().join(format!("r{seed}.csv"));
        assert!(tsk(&["rates", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", seed]).status.success());
        std::fs::read(out).unwrap()
    };
    assert_ne!(run("1"), run("2"));
}

#[test]
fn whitenoise_verify_reports_json() {
    let o = tsk(&["whitenoise-verify", "--dim", "5", "--gamma", "1.0", "--mc", "20000", "--seed", "7", "--cases", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["dim"], 5);
    assert!(v["pass"].is_boolean());
    assert_eq!(v["checks_run"], 10);
}

#[test]
fn thread_settings() {
    let o = tsk(&["--threads", "0", "whitenoise-verify", "--mc", "1000", "--cases", "1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_tsk"))
        .args(["whitenoise-verify", "--mc", "1000", "--cases", "1"])
        .env("TSK_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    // The flag wins over a broken environment value.
    let o = Command::new(env!("CARGO_BIN_EXE_tsk"))
        .args(["--threads", "1", "whitenoise-verify", "--mc", "1000", "--cases", "1"])
        .env("TSK_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "cfg.json", RATES);
    let run = |threads: &str| {
        let out = dir.path().join(format!("t{threads}.csv"));
        let o = tsk(&["--threads", threads, "rates", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success());
        std::fs::read(out).unwrap()
    };
    assert_eq!(run("1"), run("3"));
}

#[test]
fn degenerate_noise_fit_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "deg.json",
        r#"{"meta": {"family": "hard_margin", "dim": 2, "c": 1.0, "s": 1.0, "sigma": 0.25, "p_plus": 0.3, "r": 0.02},
            "hilbert_kernel": {"family": "gaussian", "width": 1.0}, "lambda_grid": [0.01, 0.1, 1.0],
            "big_n": 30, "test_pairs": 50, "seeds": 1,
            "geometric": {"noise": {"meta": {"family": "hard_margin", "dim": 2, "c": 1.0, "s": 1.0, "sigma": 0.25, "p_plus": 0.3, "r": 0.02},
              "covariance_eigenvalues": [1.0, 0.5], "t_grid": [1.0, 0.5, 0.25, 0.125], "t_bar": 1.5,
              "n_outer": 50, "n_inner": 50, "floor": 10.0},
              "gamma_grid": [0.5], "check_lambdas": [0.1]}}"#,
    );
    let o = tsk(&["approx-error", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn sample_train_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let meta = write(
        dir.path(),
        "meta.json",
        r#"{"family": "hard_margin", "dim": 2, "c": 2.0, "s": 0.25, "sigma": 0.5, "p_plus": 0.5, "r": 1.0}"#,
    );
    let train_cfg = write(
        dir.path(),
        "train.json",
        r#"{"base_kernel": {"family": "gaussian", "width": 1.0, "dim": 2},
            "hilbert_kernel": {"family": "gaussian", "width": 1.0}}"#,
    );
    let p = |n: &str| dir.path().join(n).to_string_lossy().into_owned();
    let (bags, test, model, pred) = (p("bags.json"), p("test.json"), p("model.json"), p("pred.json"));
    assert!(tsk(&["sample", "--config", &meta, "--n", "40", "--m", "20", "--seed", "1", "--out", &bags]).status.success());
    assert!(tsk(&["sample", "--config", &meta, "--n", "30", "--m", "20", "--seed", "2", "--out", &test]).status.success());
    // λ is required from either the config or the flag.
    assert_eq!(tsk(&["train", "--config", &train_cfg, "--data", &bags, "--out", &model]).status.code(), Some(2));
    let o = tsk(&["train", "--config", &train_cfg, "--data", &bags, "--out", &model, "--lambda", "0.01"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = tsk(&["predict", "--model", &model, "--data", &test, "--out", &pred]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&pred).unwrap()).unwrap();
    assert_eq!(v["predictions"].as_array().unwrap().len(), 30);
    // Disjoint supports two units apart: the classes are easy to separate.
    assert_eq!(v["accuracy"], 1.0);
}

#[test]
fn predict_rejects_bad_label() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "bags.json", r#"[{"label": 3, "samples": [[0.0, 0.0]]}]"#);
    let train_cfg = write(
        dir.path(),
        "train.json",
        r#"{"base_kernel": {"family": "gaussian", "width": 1.0, "dim": 2},
            "hilbert_kernel": {"family": "gaussian", "width": 1.0}, "lambda": 0.1}"#,
    );
    let out = dir.path().join("m.json");
    let o = tsk(&["train", "--config", &train_cfg, "--data", &data, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
