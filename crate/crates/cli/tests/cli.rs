use std::path::Path;
use std::process::{Command, Output};

use jpinn::datio::Dataset;
use jpinn_cli::RunConfig;

fn jpinn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jpinn"))
        .args(args)
        .env("JPINN_LOG", "info")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Bundled configuration shrunk to run in seconds.
fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = RunConfig::bundled();
    cfg.scenario.sampling.sites = 14;
    cfg.scenario.sampling.weeks = 6;
    cfg.scenario.sampling.spinup_weeks = 2;
    cfg.model.estimation_widths = vec![8, 4];
    cfg.model.parameter_widths = vec![8, 4];
    cfg.train.epochs = 2;
    cfg.train.batch_size = 32;
    cfg.ensemble.runs = 2;
    cfg.ensemble.holdout_sites = 2;
    cfg.importance.repeats = 1;
    let path = dir.join("tiny.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

#[test]
fn simulate_writes_every_site_week_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::load(Some(&tiny_config(dir.path()))).unwrap();
    let sc = dir.path().join("scenario.toml");
    std::fs::write(&sc, toml::to_string(&cfg.scenario).unwrap()).unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    assert!(jpinn(&["simulate", "--config", p(&sc), "--out", p(&a)]).status.success());
    assert!(jpinn(&["simulate", "--config", p(&sc), "--out", p(&b)]).status.success());
    let ds = Dataset::load_and_validate(&a).unwrap();
    assert_eq!(ds.len(), 14 * 6);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(dir.path().join("a.scenario.toml").exists());

    let c = dir.path().join("c.csv");
    assert!(jpinn(&["simulate", "--config", p(&sc), "--out", p(&c), "--seed", "99"]).status.success());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn unstable_time_step_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let mut sc = jpinn::simdata::Scenario::plume_small();
    sc.grid.steps_per_week = 1;
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, toml::to_string(&sc).unwrap()).unwrap();
    let out = jpinn(&["simulate", "--config", p(&path), "--out", p(&dir.path().join("x.csv"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("CFL") && err.contains("exceeds"), "{err}");
}

#[test]
fn unknown_config_key_and_missing_data() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seed = 1\nbogus = 2\n").unwrap();
    let data = dir.path().join("none.csv");
    let out = jpinn(&["train", "--config", p(&bad), "--data", p(&data), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let out = jpinn(&["train", "--config", p(&tiny_config(dir.path())), "--data", p(&data), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn baseline_mode_logs_zeroed_physics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data.csv");
    jpinn_cli::commands::cmd_simulate(&RunConfig::load(Some(&cfg)).unwrap().scenario, &data).unwrap();
    let out = dir.path().join("base");
    let o = jpinn(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&out), "--mode", "baseline-no-physics"]);
    assert!(o.status.success());
    let log = String::from_utf8_lossy(&o.stderr);
    assert!(log.contains("physics weights e1..e5 set to 0"), "{log}");
    let hist = std::fs::read_to_string(out.join("history.csv")).unwrap();
    assert!(hist.lines().nth(1).unwrap().contains("NA"));
    for f in ["config.toml", "split.csv", "metrics.csv", "model/model.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn evaluate_reports_perfect_fit_on_predicted_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data.csv");
    let ds = jpinn_cli::commands::cmd_simulate(&RunConfig::load(Some(&cfg)).unwrap().scenario, &data).unwrap();
    let train = dir.path().join("train");
    assert!(jpinn(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&train)]).status.success());

    // replace the observations by the model's own predictions
    let (model, _) = jpinn_cli::commands::load_trained(&train, &ds).unwrap();
    let rows: Vec<usize> = (0..ds.len()).collect();
    let mut fixture = ds.clone();
    let pred = jpinn::datio::ConcentrationModel::predict_ppb(&model, &ds, &rows);
    for (rec, q) in fixture.records.iter_mut().zip(pred) {
        let keep = q[0] <= q[1];
        rec.no2_ppb = keep.then_some(q[0]);
        rec.nox_ppb = keep.then_some(q[1]);
    }
    let perfect = dir.path().join("perfect.csv");
    fixture.save(&perfect).unwrap();
    let eval = dir.path().join("eval");
    let o = jpinn(&["evaluate", "--data", p(&perfect), "--model", p(&train), "--out", p(&eval)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(eval.join("metrics.csv")).unwrap();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let head = rdr.headers().unwrap().clone();
    let col = |n: &str| head.iter().position(|h| h == n).unwrap();
    let mut seen = 0;
    for r in rdr.records() {
        let r = r.unwrap();
        let rmse: f64 = r[col("rmse")].parse().unwrap();
        assert!(rmse < 1e-9, "{r:?}");
        if &r[col("r2")] != "NA" {
            assert!((r[col("r2")].parse::<f64>().unwrap() - 1.0).abs() < 1e-9);
        }
        seen += 1;
    }
    assert!(seen >= 4);
}

#[test]
fn ensemble_evaluate_and_importance_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data.csv");
    jpinn_cli::commands::cmd_simulate(&RunConfig::load(Some(&cfg)).unwrap().scenario, &data).unwrap();
    let ens = dir.path().join("ens");
    let o = jpinn(&["ensemble", "--config", p(&cfg), "--data", p(&data), "--out", p(&ens), "--jobs", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["plans.toml", "summary.csv", "stats.csv", "decomposition.csv", "coverage.csv", "members/run_000/predictions.csv"] {
        assert!(ens.join(f).exists(), "{f}");
    }
    let eval = dir.path().join("eval");
    assert!(jpinn(&["evaluate", "--data", p(&data), "--model", p(&ens), "--out", p(&eval)]).status.success());
    assert_eq!(
        std::fs::read(ens.join("summary.csv")).unwrap(),
        std::fs::read(eval.join("summary.csv")).unwrap()
    );

    let train = dir.path().join("train");
    assert!(jpinn(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&train)]).status.success());
    let imp = dir.path().join("imp");
    let o = jpinn(&["importance", "--config", p(&cfg), "--data", p(&data), "--model", p(&train), "--out", p(&imp)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(imp.join("importance.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 16);
}
