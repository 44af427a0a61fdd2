use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ppou_core::config::{DataSource, ModelConfig, RunConfig, TrainConfig};
use ppou_core::mixture::Architecture;

fn ppou(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ppou"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = ppou(args);
    assert!(
        out.status.success(),
        "ppou {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn rows(p: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn generate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for (out, seed) in [(&a, "3"), (&b, "3"), (&c, "4")] {
        ok(&["generate", "--dataset", "sine", "--n", "64", "--alpha", "0.1", "--seed", seed, "--out", s(out)]);
    }
    let read = |d: &Path| fs::read(d.join("sine.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    let prov = read_json(&a.join("sine.provenance.json"));
    assert_eq!(prov["rows"], 64);
    assert_eq!(prov["seed"], 3);
}

#[test]
fn generate_rings_writes_all_columns() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["generate", "--dataset", "rings", "--dim", "12", "--rings", "3", "--n", "30", "--out", s(dir.path())]);
    let text = fs::read_to_string(dir.path().join("rings.csv")).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    assert_eq!(header[..13], ["x1", "x2", "x3", "x4", "x5", "x6", "x7", "x8", "x9", "x10", "x11", "x12", "y"]);
    assert_eq!(text.lines().count(), 31);
}

#[test]
fn train_predict_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let data = dir.path().join("data");
    ok(&["train", "--dataset", "sine", "--n", "200", "--max-iters", "5", "--seed", "1", "--out", s(&run)]);
    for f in ["model.ppou", "metrics.jsonl", "summary.json", "timing.json", "config.toml"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 5);
    for line in metrics.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(rec["elbo"].as_f64().unwrap().is_finite());
    }
    assert_eq!(read_json(&run.join("summary.json"))["iterations"], 5);
    let cfg = RunConfig::load(&run.join("config.toml")).unwrap();
    assert_eq!(cfg.train.max_em_iters, 5);

    ok(&["generate", "--dataset", "sine", "--n", "50", "--seed", "2", "--out", s(&data)]);
    let model = run.join("model.ppou");
    let csv = data.join("sine.csv");
    ok(&["predict", "--model", s(&model), "--input", s(&csv), "--out", s(&run)]);
    let preds = rows(&run.join("predictions.csv"));
    assert_eq!(preds.len(), 50);
    for p in &preds {
        let (mean, var, lo, hi) = (p[0], p[1], p[2], p[3]);
        assert!(var > 0.0);
        assert!(lo < mean && mean < hi);
        let half = 1.959963984540054 * var.sqrt();
        assert!((hi - lo - 2.0 * half).abs() <= 1e-9 * (1.0 + half));
        assert!(p[4] >= 0.0 && p[4] < 4.0);
    }

    ok(&["eval", "--model", s(&model), "--data", s(&csv), "--clean-column", "clean", "--out", s(&run)]);
    let report = read_json(&run.join("eval.json"));
    assert_eq!(report["reference"], "clean");
    assert!(report["rel_l2"].as_f64().unwrap().is_finite());
}

#[test]
fn single_constant_expert_predicts_the_sample_mean() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("const.csv");
    let ys: Vec<f64> = (0..40).map(|i| 2.0 + 0.01 * ((i * 7 % 11) as f64 - 5.0)).collect();
    let mut text = String::from("x1,y\n");
    for (i, y) in ys.iter().enumerate() {
        text.push_str(&format!("{},{y}\n", i as f64 / 39.0));
    }
    fs::write(&csv, text).unwrap();
    let model = ModelConfig {
        architecture: Architecture::Basic,
        clusters: 1,
        degree: 0,
        ..ModelConfig::default()
    };
    let source = DataSource::Csv {
        path: csv.clone(),
        inputs: None,
        target: "y".into(),
        group: None,
        noise_floor: None,
        clean: None,
    };
    let mut cfg = RunConfig::new(source, model, TrainConfig::default());
    cfg.train.max_em_iters = 3;
    let toml = dir.path().join("cfg.toml");
    fs::write(&toml, cfg.to_toml_string().unwrap()).unwrap();
    let out = dir.path().join("out");
    ok(&["train", "--config", s(&toml), "--out", s(&out)]);
    ok(&["predict", "--model", s(&out.join("model.ppou")), "--input", s(&csv), "--out", s(&out)]);
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    for p in rows(&out.join("predictions.csv")) {
        assert!((p[0] - mean).abs() <= 1e-12, "{} vs {mean}", p[0]);
    }
}

#[test]
fn baseline_and_crossval_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["baseline", "--dataset", "sine", "--n", "256", "--alpha", "0", "--degree", "3", "--out", s(dir.path())]);
    let b = read_json(&dir.path().join("baseline.json"));
    assert_eq!(b["fit"]["coeffs"].as_array().unwrap().len(), 4);
    let err = b["rel_l2_clean"].as_f64().unwrap();
    assert!(err > 0.05 && err < 0.15, "{err}");

    ok(&["crossval", "--dataset", "sine", "--n", "120", "--max-iters", "3", "--k", "3", "--out", s(dir.path())]);
    let cv = read_json(&dir.path().join("crossval.json"));
    let folds = cv["folds"].as_array().unwrap();
    assert_eq!(folds.len(), 3);
    assert!(folds.iter().all(|f| f["test_rel_l2"].as_f64().unwrap().is_finite()));
}

#[test]
fn bad_invocations_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = ppou(&["train", "--dataset", "moons", "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error: unknown dataset"));

    let out = ppou(&["baseline", "--dataset", "rings", "--n", "40", "--out", s(dir.path())]);
    assert!(!out.status.success());

    let out = ppou(&["predict", "--model", s(&dir.path().join("missing.ppou")), "--input", "x.csv"]);
    assert!(!out.status.success());
}
