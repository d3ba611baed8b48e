use std::path::Path;
use std::process::{Command, Output};
use std::sync::Arc;

use distcausal::dataset::Dataset;
use distcausal::distspace::QuantileGrid;
use distcausal::estimators::{CrossFit, EstimatorConfig, EstimatorKind};
use distcausal::io::load_dataset;
use distcausal::kernels::Kernel;
use distcausal::simlab::{Dgp, DgpConfig};
use serde_json::Value;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_distcausal"))
        .args(args)
        .env("DISTCAUSAL_THREADS", "1")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) {
    let out = cli(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn simulate(dir: &Path, n: usize) -> (String, String) {
    let d = dir.to_str().unwrap();
    ok(&[
        "simulate",
        "--n-units",
        &n.to_string(),
        "--seed",
        "4",
        "--out",
        d,
    ]);
    (
        dir.join("units.csv").to_str().unwrap().to_string(),
        dir.join("observations.csv").to_str().unwrap().to_string(),
    )
}

#[test]
fn estimate_matches_library_call() {
    let tmp = tempfile::tempdir().unwrap();
    let (u, o) = simulate(&tmp.path().join("data"), 100);
    let out = tmp.path().join("est");
    ok(&[
        "estimate",
        "--units",
        &u,
        "--observations",
        &o,
        "--nuisance",
        "oracle",
        "--bandwidth",
        "0.3",
        "--seed",
        "8",
        "--out",
        out.to_str().unwrap(),
    ]);
    let report = read_json(&out.join("estimate.json"));

    let data = load_dataset(Path::new(&u), Path::new(&o), &QuantileGrid::default()).unwrap();
    let nu = Arc::new(Dgp::new(DgpConfig::default()).unwrap()).oracle_nuisances(0.0, 1.0);
    let trainer = move |_: &Dataset, _: usize| Ok(nu.clone());
    let cf = CrossFit::train(&data, &trainer, 2, 8).unwrap();
    let mut cfg = EstimatorConfig::new(Kernel::Epanechnikov, 0.3).unwrap();
    cfg.seed = 8;
    let rows = report["result"]["estimates"].as_array().unwrap();
    assert_eq!(rows.len(), 9);
    let mut k = 0;
    for a in [-0.5, 0.0, 0.5] {
        let all = cf.estimate_all(&cfg, a).unwrap();
        for (kind, e) in EstimatorKind::ALL.iter().zip(all) {
            let row = &rows[k];
            assert_eq!(row["estimator"], serde_json::to_value(kind).unwrap());
            assert_eq!(row["a"].as_f64().unwrap(), a);
            let theta: Vec<f64> = row["theta"]
                .as_array()
                .unwrap()
                .iter()
                .map(|v| v.as_f64().unwrap())
                .collect();
            assert_eq!(theta, e.theta.values());
            k += 1;
        }
    }
    assert_eq!(report["config"]["seed"], 8);
    assert_eq!(report["config"]["bandwidth"], 0.3);

    // CSV carries the same numbers
    let csv = std::fs::read_to_string(out.join("estimate.csv")).unwrap();
    let first = csv.lines().nth(1).unwrap();
    let theta0: f64 = first.split(',').nth(4).unwrap().parse().unwrap();
    assert_eq!(theta0, rows[0]["theta"][0].as_f64().unwrap());
}

#[test]
fn rerun_is_byte_identical_and_replayable() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("b");
    let o = out.to_str().unwrap();
    let args = [
        "band",
        "--nuisance",
        "oracle",
        "--n-units",
        "400",
        "--paths",
        "1000",
        "--treatment-levels=-0.5,0",
        "--out",
        o,
    ];
    ok(&args);
    let first = std::fs::read(out.join("band.json")).unwrap();
    let first_csv = std::fs::read(out.join("band.csv")).unwrap();
    ok(&args);
    assert_eq!(first, std::fs::read(out.join("band.json")).unwrap());
    assert_eq!(first_csv, std::fs::read(out.join("band.csv")).unwrap());

    // replay from the echoed config
    let echo = tmp.path().join("echo.json");
    std::fs::copy(out.join("band.json"), &echo).unwrap();
    ok(&["band", "--config", echo.to_str().unwrap()]);
    assert_eq!(first, std::fs::read(out.join("band.json")).unwrap());

    let v: Value = serde_json::from_slice(&first).unwrap();
    for row in v["result"].as_array().unwrap() {
        let get = |k: &str| -> Vec<f64> {
            row[k]
                .as_array()
                .unwrap()
                .iter()
                .map(|x| x.as_f64().unwrap())
                .collect()
        };
        let (lo, hi, theta, bias) = (get("lower"), get("upper"), get("theta"), get("bias"));
        let h = row["h_star"].as_f64().unwrap();
        for i in 0..lo.len() {
            let center = theta[i] - bias[i] * h * h;
            assert!(lo[i] <= center && center <= hi[i]);
        }
    }
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| cli(args).status.code().unwrap();
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["nonsense"]), 1);
    assert_eq!(code(&["estimate", "--folds", "1"]), 1);
    assert_eq!(code(&["estimate", "--bandwidth", "wide"]), 1);

    let units = tmp.path().join("u.csv");
    let obs = tmp.path().join("o.csv");
    std::fs::write(&units, "unit_id,treatment,x1\na,0.1,1\nb,0.2,2\n").unwrap();
    std::fs::write(&obs, "unit_id,value\na,1\nghost,2\n").unwrap();
    let out = cli(&[
        "estimate",
        "--units",
        units.to_str().unwrap(),
        "--observations",
        obs.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("line 3") && msg.contains("ghost"), "{msg}");

    let bad_threads = Command::new(env!("CARGO_BIN_EXE_distcausal"))
        .args([
            "simulate",
            "--n-units",
            "5",
            "--out",
            tmp.path().to_str().unwrap(),
        ])
        .env("DISTCAUSAL_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(bad_threads.status.code(), Some(1));
}
