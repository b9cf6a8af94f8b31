//! End-to-end: simulate -> fit -> score -> info round trips, verify suites,
//! determinism, and error exit codes.

use std::fs;
use std::path::Path;
use std::process::Command;

fn hmt() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hmt"))
}

fn write_model(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let model = dir.join("model.json");
    fs::write(
        &model,
        r#"{"states":2,"emission":{"family":"gaussian"},"epsilon_floor":0.001}"#,
    )
    .unwrap();
    let theta = dir.join("theta.json");
    fs::write(
        &theta,
        r#"{"transition":[[0.6,0.4],[0.45,0.55]],"emission":{"mu":[-1.0,1.0],"sigma":[1.0,1.0]}}"#,
    )
    .unwrap();
    (model, theta)
}

#[test]
fn simulate_is_deterministic_and_prints_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (model, theta) = write_model(dir.path());
    let out1 = dir.path().join("a.jsonl");
    let out2 = dir.path().join("b.jsonl");
    for out in [&out1, &out2] {
        let res = hmt()
            .args([
                "simulate",
                "--model",
                model.to_str().unwrap(),
                "--theta",
                theta.to_str().unwrap(),
                "--depth",
                "4",
                "--root-law",
                "dirac:0",
                "--seed",
                "7",
                "--out",
                out.to_str().unwrap(),
            ])
            .output()
            .unwrap();
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        assert!(String::from_utf8_lossy(&res.stdout).contains("seed: 7"));
    }
    assert_eq!(fs::read(&out1).unwrap(), fs::read(&out2).unwrap());
}

#[test]
fn simulate_fit_score_info_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let (model, theta) = write_model(dir.path());
    let sample = dir.path().join("sample.jsonl");
    let status = hmt()
        .args([
            "simulate",
            "--model",
            model.to_str().unwrap(),
            "--theta",
            theta.to_str().unwrap(),
            "--depth",
            "5",
            "--seed",
            "11",
            "--out",
            sample.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());

    let fit = dir.path().join("fit.json");
    let res = hmt()
        .args([
            "fit",
            "--data",
            sample.to_str().unwrap(),
            "--model",
            model.to_str().unwrap(),
            "--root-state",
            "0",
            "--init",
            "moment",
            "--max-iter",
            "200",
            "--tol",
            "1e-7",
            "--out",
            fit.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let fit_json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&fit).unwrap()).unwrap();
    let trace = fit_json["loglik_trace"].as_array().unwrap();
    for w in trace.windows(2) {
        assert!(w[1].as_f64().unwrap() >= w[0].as_f64().unwrap() - 1e-10);
    }

    // The fitted theta feeds straight back into score and info.
    let theta_hat = dir.path().join("theta_hat.json");
    fs::write(&theta_hat, serde_json::to_string(&fit_json["theta_hat"]).unwrap()).unwrap();
    let res = hmt()
        .args([
            "score",
            "--data",
            sample.to_str().unwrap(),
            "--model",
            model.to_str().unwrap(),
            "--theta",
            theta_hat.to_str().unwrap(),
            "--root-state",
            "0",
        ])
        .output()
        .unwrap();
    assert!(res.status.success());
    let score_json: serde_json::Value =
        serde_json::from_slice(&res.stdout).unwrap();
    let score = score_json["score"].as_array().unwrap();
    for v in score {
        assert!(v.as_f64().unwrap().abs() < 1e-2, "score at optimum {v}");
    }

    let res = hmt()
        .args([
            "info",
            "--data",
            sample.to_str().unwrap(),
            "--model",
            model.to_str().unwrap(),
            "--theta",
            theta_hat.to_str().unwrap(),
            "--method",
            "louis",
        ])
        .output()
        .unwrap();
    assert!(res.status.success());
    let info_json: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    assert!(info_json["observed_information"].is_array());
}

#[test]
fn verify_dobrushin_defaults_pass() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.csv");
    let config = dir.path().join("config.json");
    // Small case count to keep the test fast; thresholds untouched.
    let mut cfg = serde_json::json!({
        "schema": "hmt-experiment/1",
        "model": {"states": 2, "emission": {"family": "gaussian"}, "epsilon_floor": 1e-3},
        "theta": {"transition": [[0.6,0.4],[0.45,0.55]],
                   "emission": {"mu": [-1.0,1.0], "sigma": [1.0,1.0]}},
        "seed": 5
    });
    cfg["knobs"] = serde_json::json!({"cases": 100});
    fs::write(&config, serde_json::to_string(&cfg).unwrap()).unwrap();
    let res = hmt()
        .args([
            "verify",
            "--suite",
            "dobrushin",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let csv = fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("case,measured,bound_or_reference,margin,pass"));
    assert!(out.with_extension("summary.json").exists());
}

#[test]
fn config_with_unknown_keys_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.csv");
    let config = dir.path().join("config.json");
    fs::write(
        &config,
        r#"{"schema":"hmt-experiment/1","model":{"states":2,"emission":{"family":"gaussian"}},
            "theta":{"transition":[[0.6,0.4],[0.45,0.55]],"emission":{"mu":[-1,1],"sigma":[1,1]}},
            "bogus_key": 1}"#,
    )
    .unwrap();
    let res = hmt()
        .args([
            "verify",
            "--suite",
            "dobrushin",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("config.json"));
}

#[test]
fn unknown_flags_and_missing_files_fail() {
    let res = hmt().args(["simulate", "--bogus-flag", "1"]).output().unwrap();
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("--bogus-flag"));

    let res = hmt()
        .args([
            "fit",
            "--data",
            "/nonexistent/sample.jsonl",
            "--model",
            "/nonexistent/model.json",
            "--out",
            "/tmp/x.json",
        ])
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("/nonexistent"));
}

#[test]
fn seed_is_drawn_and_printed_when_omitted() {
    let dir = tempfile::tempdir().unwrap();
    let (model, theta) = write_model(dir.path());
    let out = dir.path().join("s.jsonl");
    let res = hmt()
        .args([
            "simulate",
            "--model",
            model.to_str().unwrap(),
            "--theta",
            theta.to_str().unwrap(),
            "--depth",
            "2",
            "--out",
            out.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(res.status.success());
    let stdout = String::from_utf8_lossy(&res.stdout);
    let seed_line = stdout.lines().find(|l| l.starts_with("seed: ")).unwrap();
    let seed: u64 = seed_line.trim_start_matches("seed: ").parse().unwrap();

    // Rerunning with the printed seed reproduces the file exactly.
    let out2 = dir.path().join("s2.jsonl");
    let res = hmt()
        .args([
            "simulate",
            "--model",
            model.to_str().unwrap(),
            "--theta",
            theta.to_str().unwrap(),
            "--depth",
            "2",
            "--seed",
            &seed.to_string(),
            "--out",
            out2.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(res.status.success());
    assert_eq!(fs::read(&out).unwrap(), fs::read(&out2).unwrap());
}
