use serde_json::Value;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn atrans(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atrans"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.json");
    let cfg = serde_json::json!({
        "experiment": { "id": "quadratic", "sigma_obs": 1.0, "rows": 200 },
        "prior": { "kind": "scalar", "mean": 0.0, "std": 1.0 },
        "model": { "variant": "mlp_residual", "depth": 2, "width": 8 },
        "training": { "epochs": 1, "batch_size": 4, "m": 4 },
        "pcn": { "n_steps": 2000, "burn_in": 200, "thin": 2 },
        "eval": { "n_samples": 200, "n_truth": 200 },
        "paths": { "out_dir": dir },
        "seed": 11
    });
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_manifest(artifact: &Path) -> Value {
    let mut m = artifact.as_os_str().to_owned();
    m.push(".manifest.json");
    serde_json::from_str(&std::fs::read_to_string(PathBuf::from(m)).unwrap()).unwrap()
}

#[test]
fn shipped_configs_parse() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["exp1.json", "exp2.json", "exp3.json"] {
        let cfg = configs_dir().join(name);
        // an unknown subcommand argument would fail with 1; a missing dataset is what we expect
        let out = atrans(&["train", "--config", s(&cfg), "--dataset", s(&dir.path().join("none.atjd"))]);
        assert_eq!(out.status.code(), Some(1), "{name}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stderr).contains("missing file"), "{name}");
    }
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs_dir().join("exp1.json");
    let a = dir.path().join("a.atjd");
    let b = dir.path().join("b.atjd");
    for p in [&a, &b] {
        let out = atrans(&["gen-data", "--config", s(&cfg), "--n", "1000", "--seed", "7", "--out", s(p)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let m = read_manifest(&a);
    assert_eq!(m["seed"], 7);
    assert_eq!(m["results"]["rows"], 1000);
    assert_eq!(m["config_sha256"].as_str().unwrap().len(), 64);

    let out = atrans(&["gen-data", "--config", s(&cfg), "--n", "1000", "--seed", "8", "--out", s(&b)]);
    assert!(out.status.success());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn train_sample_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("d.atjd");
    let model = dir.path().join("m.atmc");
    let out = atrans(&["gen-data", "--config", s(&cfg), "--n", "10", "--out", s(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let out = atrans(&["train", "--config", s(&cfg), "--dataset", s(&data), "--out", s(&model)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m = read_manifest(&model);
    assert!(m["results"]["final_loss"].as_f64().unwrap().is_finite());
    assert_eq!(m["command"], "train");

    let samples = dir.path().join("s.atjd");
    let out = atrans(&[
        "sample", "--config", s(&cfg), "--model", s(&model), "--y", "1.5", "--n", "50", "--out", s(&samples),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(samples.exists());

    let metrics = dir.path().join("metrics.jsonl");
    let out = atrans(&[
        "eval", "--config", s(&cfg), "--model", s(&model), "--dataset", s(&data), "--y-index", "3", "--out",
        s(&metrics),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows: Vec<Value> = std::fs::read_to_string(&metrics)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let names: Vec<&str> = rows.iter().map(|r| r["metric"].as_str().unwrap()).collect();
    for want in ["w1", "energy_distance_sq", "posterior_mean"] {
        assert!(names.contains(&want), "missing {want} in {names:?}");
    }
    assert!(rows.iter().all(|r| r["value"].as_f64().is_some_and(f64::is_finite)));
}

#[test]
fn pcn_writes_ensemble_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out_path = dir.path().join("chain.atjd");
    let out = atrans(&["pcn", "--config", s(&cfg), "--y", "2.0", "--out", s(&out_path)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_path.exists());
    let m = read_manifest(&out_path);
    let rate = m["results"]["acceptance_rate"].as_f64().unwrap();
    assert!(rate > 0.0 && rate <= 1.0);
}

#[test]
fn gradcheck_passes_on_default_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = atrans(&["gradcheck", "--config", s(&cfg), "--coords", "20"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn overrides_reach_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("d.atjd");
    let out = atrans(&["gen-data", "--config", s(&cfg), "--out", s(&data), "--experiment.rows=25"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_manifest(&data)["results"]["rows"], 25);
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());

    let missing = atrans(&["gen-data", "--config", s(&dir.path().join("nope.json")), "--out", "x"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("missing file"));

    let bad_key = atrans(&["gen-data", "--config", s(&cfg), "--out", "x", "--training.bogus=1"]);
    assert_eq!(bad_key.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad_key.stderr).contains("config error"));

    let invalid = atrans(&["gen-data", "--config", s(&cfg), "--out", "x", "--experiment.sigma_obs=-1"]);
    assert_eq!(invalid.status.code(), Some(1));

    let data = dir.path().join("d.atjd");
    assert!(atrans(&["gen-data", "--config", s(&cfg), "--n", "5", "--out", s(&data)]).status.success());
    let model = dir.path().join("m.atmc");
    assert!(atrans(&["train", "--config", s(&cfg), "--dataset", s(&data), "--out", s(&model)]).status.success());
    let out = atrans(&[
        "eval", "--config", s(&cfg), "--model", s(&model), "--dataset", s(&data), "--y-index", "99", "--out",
        s(&dir.path().join("m.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));

    let strict = atrans(&["gradcheck", "--config", s(&cfg), "--coords", "5", "--tol", "0"]);
    assert_eq!(strict.status.code(), Some(2), "{}", String::from_utf8_lossy(&strict.stderr));

    let unknown = atrans(&["frobnicate"]);
    assert_eq!(unknown.status.code(), Some(1));
}
