use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use drlpdid::simulation::{generate_replication, McDesign};
use drlpdid_cli::write_panel_csv;
use serde_json::Value;
use tempfile::TempDir;

fn drlpdid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drlpdid"))
        .args(args)
        .output()
        .unwrap()
}

fn write_panel(dir: &Path) {
    let panel = generate_replication(
        &McDesign {
            n_units: 300,
            ..Default::default()
        },
        0,
    )
    .unwrap()
    .panel;
    let mut buf = Vec::new();
    write_panel_csv(&panel, 1, &mut buf).unwrap();
    fs::write(dir.join("panel.csv"), buf).unwrap();
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn estimate_writes_six_horizon_event_study() {
    let tmp = TempDir::new().unwrap();
    write_panel(tmp.path());
    let cfg = write_config(
        tmp.path(),
        r#"{"mode": "estimate", "input": "panel.csv", "estimators": ["DRLPDID", "LPDID-RW"],
            "horizons": {"min": -2, "max": 3}, "bootstrap": {"B": 500, "seed": 9}, "out_dir": "out"}"#,
    );
    let o = drlpdid(&["estimate", "--config", &cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = tmp.path().join("out");
    let mut rdr = csv::Reader::from_path(out.join("event_study_drlpdid.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    assert_eq!(&headers[1], "h");
    assert!(headers.iter().any(|h| h == "config_hash") && headers.iter().any(|h| h == "seed"));
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 6);
    let hs: Vec<i64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert_eq!(hs, vec![-2, -1, 0, 1, 2, 3]);

    let band: Value =
        serde_json::from_slice(&fs::read(out.join("band_drlpdid.json")).unwrap()).unwrap();
    assert_eq!(band["B"], 500);
    assert_eq!(band["seed"], 9);
    assert_eq!(band["scheme"], "rademacher");
    assert_eq!(band["horizons"].as_array().unwrap().len(), 6);
    let c_star = band["c_star"].as_f64().unwrap();
    assert!(c_star > 1.9 && c_star < 4.0);
    for row in band["horizons"].as_array().unwrap() {
        assert!(row["band_lo"].as_f64() <= row["ci_lo"].as_f64());
        assert!(row["band_hi"].as_f64() >= row["ci_hi"].as_f64());
    }
    let es: Value =
        serde_json::from_slice(&fs::read(out.join("event_study_drlpdid.json")).unwrap()).unwrap();
    assert_eq!(es["config_hash"], band["config_hash"]);
    assert!(es["average_post"]["estimate"].as_f64().is_some());
    // benchmark rows carry no component means
    let rw = fs::read_to_string(out.join("event_study_lpdid-rw.csv")).unwrap();
    assert!(rw.lines().nth(1).unwrap().contains(",,"));
    for f in [
        "plot_drlpdid.csv",
        "diagnostics_drlpdid.json",
        "manifest.json",
        "plot_lpdid-rw.csv",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let plot = fs::read_to_string(out.join("plot_drlpdid.csv")).unwrap();
    assert!(plot.starts_with("h,estimate,ci_lo,ci_hi,band_lo,band_hi,config_hash,seed"));
}

#[test]
fn seed_override_is_recorded() {
    let tmp = TempDir::new().unwrap();
    write_panel(tmp.path());
    let cfg = write_config(
        tmp.path(),
        r#"{"input": "panel.csv", "estimators": ["LPDID-RA"], "horizons": [0, 1], "bootstrap": {"B": 200}}"#,
    );
    let run = |seed: &str, out: &str| {
        let out = tmp.path().join(out);
        let o = drlpdid(&[
            "estimate",
            "--config",
            &cfg,
            "--seed",
            seed,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success());
        let es: Value =
            serde_json::from_slice(&fs::read(out.join("event_study_lpdid-ra.json")).unwrap())
                .unwrap();
        es
    };
    let (a, b, c) = (run("1", "a"), run("2", "b"), run("1", "c"));
    assert_ne!(a["config_hash"], b["config_hash"]);
    assert_eq!(b["seed"], 2);
    assert_eq!(a["horizons"], b["horizons"]);
    assert_eq!(a, c);
}

#[test]
fn missing_covariate_column_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    write_panel(tmp.path());
    let cfg = write_config(
        tmp.path(),
        r#"{"input": "panel.csv", "covariates": ["income"], "horizons": [0]}"#,
    );
    let o = drlpdid(&[
        "estimate",
        "--config",
        &cfg,
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("income"));
}

#[test]
fn bad_data_exits_with_data_code() {
    let tmp = TempDir::new().unwrap();
    fs::write(
        tmp.path().join("bad.csv"),
        "unit_id,time,outcome,first_treat\na,1,1,0\na,2,2,0\n",
    )
    .unwrap();
    let o = drlpdid(&[
        "validate",
        "--input",
        tmp.path().join("bad.csv").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("row 2"));
}

#[test]
fn malformed_config_exits_with_config_code() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"{"input": "panel.csv", "horizons": [0], "estimators": ["OLS"]}"#,
    );
    assert_eq!(
        drlpdid(&["estimate", "--config", &cfg]).status.code(),
        Some(2)
    );
    let cfg = write_config(
        tmp.path(),
        r#"{"scenario": "A", "N": 100, "R": 2, "c": 1.5}"#,
    );
    assert_eq!(
        drlpdid(&["simulate", "--config", &cfg]).status.code(),
        Some(2)
    );
}

#[test]
fn validate_prints_summary() {
    let tmp = TempDir::new().unwrap();
    write_panel(tmp.path());
    let o = drlpdid(&[
        "validate",
        "--input",
        tmp.path().join("panel.csv").to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["units"], 300);
    assert_eq!(v["periods"], 17);
    assert_eq!(v["cohorts"], serde_json::json!([9, 10, 11, 12, 13, 14]));
}

#[test]
fn simulate_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"{"mode": "simulate", "scenario": "A", "N": 200, "T": 17, "delta": 0.0, "R": 5, "seed": 11,
            "estimators": ["DRLPDID", "LPDID-RW"], "horizons": [0, 1, 2, 3]}"#,
    );
    let run = |out: &str| {
        let out = tmp.path().join(out);
        let o = drlpdid(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        (
            fs::read(out.join("mc_report.json")).unwrap(),
            fs::read(out.join("mc_report.csv")).unwrap(),
        )
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(a, b);
    let report: Value = serde_json::from_slice(&a.0).unwrap();
    assert_eq!(report["seed"], 11);
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["replications"], 5);
    assert_eq!(rows[0]["estimator"], "DRLPDID");
    let csv = String::from_utf8(a.1).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("scenario,N,delta,estimator,bias,rmse,coverage"));
}
