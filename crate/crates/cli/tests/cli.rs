use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::Request;
use serde_json::{json, Value};
use tower::ServiceExt;

use tidecast::dataset::Dataset;
use tidecast::ensemble::ForecastEnsemble;

const SYNTH: &str = "patches = 2\ndim = 8\nhours = 72\nseed = 3\n";

const TRAIN: &str = "\
# tiny run for tests
epochs = 1
batch_size = 16
context_length = 4
train_steps = 40
val_steps = 10
test_steps = 20
eval_horizon = 3
eval_stride = 4
test_scenarios = 3
";

fn tidecast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tidecast"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok_json(args: &[&str]) -> Value {
    let out = tidecast(args);
    assert!(
        out.status.success(),
        "tidecast {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    ckpt: PathBuf,
}

fn trained() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let data = root.join("data");
    fs::write(root.join("synth.cfg"), SYNTH).unwrap();
    fs::write(root.join("train.cfg"), TRAIN).unwrap();
    ok_json(&["synth", "--config", s(&root.join("synth.cfg")), "--out", s(&data)]);
    let ckpt = root.join("model.ckpt");
    ok_json(&[
        "train",
        "--data",
        s(&data),
        "--config",
        s(&root.join("train.cfg")),
        "--out",
        s(&ckpt),
        "--ablation",
        "all",
        "--seed",
        "4",
    ]);
    Fixture {
        _dir: dir,
        root,
        data,
        ckpt,
    }
}

#[test]
fn synth_writes_a_loadable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("s.cfg");
    fs::write(&cfg, SYNTH).unwrap();
    let out = dir.path().join("d");
    let v = ok_json(&["synth", "--config", s(&cfg), "--out", s(&out), "--patches", "3"]);
    assert_eq!(v["patches"], 3);
    assert_eq!(v["timesteps"], 72);
    let ds = Dataset::load(&out).unwrap();
    assert_eq!(ds.len(), 3);
    assert_eq!(ds.dim(), Some(8));
    assert!(out.join("synth.cfg").exists());
    // Same config → same files.
    let again = dir.path().join("e");
    ok_json(&["synth", "--config", s(&cfg), "--out", s(&again), "--patches", "3"]);
    assert_eq!(
        fs::read_to_string(out.join("p01.gsf")).unwrap(),
        fs::read_to_string(again.join("p01.gsf")).unwrap()
    );
}

#[test]
fn bad_config_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "patches = 2\nwobble = 1\n").unwrap();
    let out = tidecast(&["synth", "--config", s(&cfg), "--out", s(&dir.path().join("x"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.cfg:2"), "{err}");
}

#[test]
fn params_are_independent_of_patch_count() {
    let v = ok_json(&["params", "--dim", "16"]);
    assert_eq!(v["identical"], true);
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["patches"], 2);
    assert_eq!(rows[1]["patches"], 5);
    assert!(rows[0]["parameter_count"].as_u64().unwrap() > 0);
}

#[test]
fn train_forecast_eval_query_pipeline() {
    let f = trained();
    assert!(f.ckpt.exists());
    assert!(f.root.join("model.last.ckpt").exists());
    let csv = fs::read_to_string(f.root.join("model.metrics.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("epoch,loss,val_nacrps,lr"));
    assert_eq!(csv.lines().count(), 2);

    let info = ok_json(&["inspect", "--ckpt", s(&f.ckpt)]);
    assert_eq!(info["model"]["dim"], 8);
    assert_eq!(info["model"]["context_len"], 4);

    // Test split begins at hour 50; its first forecastable hour is 54.
    let ens_a = f.root.join("a.gsf");
    let ens_b = f.root.join("b.gsf");
    for (patch, out) in [("p00", &ens_a), ("p01", &ens_b)] {
        let v = ok_json(&[
            "forecast", "--ckpt", s(&f.ckpt), "--data", s(&f.data), "--patch", patch, "--start",
            "2024-01-03T06:00", "--horizon", "3", "--scenarios", "4", "--seed", "9", "--out", s(out),
        ]);
        assert_eq!(v["members"], 4);
        assert_eq!(v["horizon"], 3);
    }
    let ens = ForecastEnsemble::read(&ens_a).unwrap();
    assert!(ens.members.iter().flatten().all(|fr| fr.cells().iter().all(|&x| x >= 0.0)));

    // Forecasts are reproducible.
    let again = f.root.join("again.gsf");
    ok_json(&[
        "forecast", "--ckpt", s(&f.ckpt), "--data", s(&f.data), "--patch", "p00", "--start",
        "2024-01-03T06:00", "--horizon", "3", "--scenarios", "4", "--seed", "9", "--out", s(&again),
    ]);
    assert_eq!(fs::read(&ens_a).unwrap(), fs::read(&again).unwrap());

    let report = f.root.join("report.json");
    let out = tidecast(&["eval", "--ckpt", s(&f.ckpt), "--data", s(&f.data), "--split", "test", "--out", s(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    for k in ["model", "persistence", "climatology"] {
        assert!(r[k]["nrmse"].as_f64().unwrap().is_finite(), "{k}");
        assert!(r[k]["nacrps"].as_f64().unwrap().is_finite(), "{k}");
    }
    assert_eq!(r["model"]["members"], 3);
    assert_eq!(r["persistence"]["members"], 1);

    // A polygon straddling both patches.
    let poly = f.root.join("poly.txt");
    fs::write(&poly, "6 1\n10 1\n10 5\n6 5\n").unwrap();
    let area = ok_json(&[
        "query", "area", "--polygon", s(&poly), "--d", "0.5", "--horizon", "3", "--data", s(&f.data),
        "--ensemble", s(&ens_a), s(&ens_b),
    ]);
    assert_eq!(area["per_patch"].as_array().unwrap().len(), 2);
    let p = area["probability_above"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));
    let route = ok_json(&[
        "query", "route", "--polygon", s(&poly), "--horizon", "3", "--data", s(&f.data), "--ensemble",
        s(&ens_a), s(&ens_b),
    ]);
    assert_eq!(route["kind"], "route");
    assert_eq!(route["threshold"], 0.0);

    // The HTTP service answers identically for the same ensembles.
    let state = Arc::new(tidecast_service::ServiceState::new());
    state.load_dataset(Dataset::load(&f.data).unwrap());
    let ids: Vec<String> = [&ens_a, &ens_b]
        .iter()
        .map(|p| state.insert_ensemble(ForecastEnsemble::read(p).unwrap()).unwrap())
        .collect();
    let body = json!({
        "polygon": [[6, 1], [10, 1], [10, 5], [6, 5]],
        "d": 0.5,
        "horizon": 3,
        "ensemble_ids": ids,
    });
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
    let http: Value = rt.block_on(async {
        let req = Request::post("/query/area")
            .header("content-type", "application/json")
            .body(Body::from(body.to_string()))
            .unwrap();
        let resp = tidecast_service::router(state).oneshot(req).await.unwrap();
        serde_json::from_slice(&to_bytes(resp.into_body(), usize::MAX).await.unwrap()).unwrap()
    });
    assert_eq!(http["probability_above"], area["probability_above"]);
    assert_eq!(http["per_patch"], area["per_patch"]);
}

#[test]
fn user_errors_exit_nonzero() {
    let f = trained();
    let out = tidecast(&[
        "forecast", "--ckpt", s(&f.ckpt), "--data", s(&f.data), "--patch", "p09", "--start", "2024-01-03T06:00",
        "--out", s(&f.root.join("x.gsf")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("p09"));

    let out = tidecast(&[
        "forecast", "--ckpt", s(&f.ckpt), "--data", s(&f.data), "--patch", "p00", "--start", "2024-01-01T01:00",
        "--out", s(&f.root.join("x.gsf")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("insufficient"));

    let out = tidecast(&["train", "--data", s(&f.data), "--out", s(&f.root.join("m.ckpt")), "--ablation", "everything"]);
    assert!(!out.status.success());
}

#[test]
fn ablate_runs_all_four_configurations() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::write(root.join("synth.cfg"), SYNTH).unwrap();
    fs::write(root.join("train.cfg"), TRAIN).unwrap();
    let out_dir = root.join("ablation");
    let out = tidecast(&[
        "ablate",
        "--synth",
        s(&root.join("synth.cfg")),
        "--config",
        s(&root.join("train.cfg")),
        "--out",
        s(&out_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8_lossy(&out.stdout);
    for label in ["| INUN |", "| INUN+ELEV |", "| INUN+COV |", "| INUN+ELEV+COV |", "| persistence |", "| climatology |"] {
        assert!(table.contains(label), "{label} missing from\n{table}");
    }
    let json: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 4);
    for a in ["inun", "inun_elev", "inun_cov", "all"] {
        assert!(out_dir.join(format!("{a}.ckpt")).exists(), "{a}");
    }
}
