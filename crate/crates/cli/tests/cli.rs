use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn batchcast(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_batchcast"));
    cmd.args(args);
    if let Some(t) = threads {
        cmd.env("BATCHCAST_THREADS", t);
    }
    cmd.output().unwrap()
}

fn run(cmd: &str, config: &Path, out: &Path, sets: &[&str]) -> Output {
    let mut args = vec![cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    for s in sets {
        args.extend(["--set", s]);
    }
    batchcast(&args, Some("2"))
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small synthetic experiment: writes the data and returns the config path.
fn setup(dir: &Path) -> PathBuf {
    let synth_cfg = dir.join("synth.json");
    std::fs::write(&synth_cfg, r#"{"n_series": 2, "length": 400, "period": 12, "amplitude": 2.0, "phi": 0.8, "seed": 3}"#).unwrap();
    let o = run("synth", &synth_cfg, &dir.join("data"), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = dir.join("exp.json");
    std::fs::write(
        &cfg,
        r#"{
            "dataset": "data/synth.csv",
            "horizon": 4,
            "rolling_starts": 3,
            "batch_size": 8,
            "max_batches_per_epoch": 4,
            "max_epochs": 3,
            "hidden": 5,
            "layers": 1,
            "n_samples": 20,
            "acf_max_lag": 5,
            "seed": 1
        }"#,
    )
    .unwrap();
    cfg
}

#[test]
fn synth_writes_all_rows_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let text = std::fs::read_to_string(dir.path().join("data/synth.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 400);
    let o = run("synth", &dir.path().join("synth.json"), &dir.path().join("again"), &[]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(dir.path().join("data/synth.csv")).unwrap(), std::fs::read(dir.path().join("again/synth.csv")).unwrap());
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("data/run-manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["artifacts"]["synth.csv"].as_str().unwrap().len(), 64);
}

#[test]
fn invalid_phi_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, "{}").unwrap();
    let o = run("synth", &cfg, &dir.path().join("o"), &["phi=1.2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("phi"), "{}", stderr(&o));
}

#[test]
fn config_problems_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    assert_eq!(run("train", &dir.path().join("missing.json"), &dir.path().join("o"), &[]).status.code(), Some(2));
    assert_eq!(run("train", &cfg, &dir.path().join("o"), &["dataset=nowhere.csv"]).status.code(), Some(2));
    assert_eq!(run("train", &cfg, &dir.path().join("o"), &["unknown_key=1"]).status.code(), Some(2));
    assert_eq!(batchcast(&["synth", "--config", cfg.to_str().unwrap(), "--out", "x"], Some("zero")).status.code(), Some(2));
}

#[test]
fn too_short_data_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let o = run("train", &cfg, &dir.path().join("o"), &["horizon=40", "rolling_starts=6"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn train_evaluate_and_acf_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let gls = dir.path().join("gls");
    let iid = dir.path().join("iid");
    assert!(run("train", &cfg, &gls, &[]).status.success());
    assert!(run("train", &cfg, &iid, &["mode=iid"]).status.success());
    for out in [&gls, &iid] {
        assert!(out.join("checkpoint.json").is_file());
        let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
        assert!(history.starts_with("epoch,train_loss,val_loss,lr,clipped"));
    }

    // identical reruns give identical histories
    let rerun = dir.path().join("gls-again");
    assert!(run("train", &cfg, &rerun, &[]).status.success());
    assert_eq!(std::fs::read(gls.join("history.csv")).unwrap(), std::fs::read(rerun.join("history.csv")).unwrap());

    for (mode, out) in [("calibrated", "eval-cal"), ("iid", "eval-iid")] {
        let out = dir.path().join(out);
        let ckpt = format!("checkpoint={}", gls.join("checkpoint.json").display());
        let o = run("evaluate", &cfg, &out, &[&format!("eval_mode={mode}"), &ckpt]);
        assert!(o.status.success(), "{}", stderr(&o));
        let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
        for key in ["crps", "risk_0.5", "risk_0.9", "mse"] {
            assert!(report[key].as_f64().unwrap().is_finite(), "{key}");
        }
        let forecasts = std::fs::read_to_string(out.join("forecasts.csv")).unwrap();
        assert_eq!(forecasts.lines().count(), 1 + 2 * 3 * 20 * 4);
        let quantiles = std::fs::read_to_string(out.join("quantiles.csv")).unwrap();
        assert_eq!(quantiles.lines().count(), 1 + 2 * 3 * 4 * 19);
        let weights = std::fs::read_to_string(out.join("weights.csv")).unwrap();
        assert!(weights.starts_with("series_id,step,w_0,w_1,w_2,w_3"));
        let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("run-manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["config"]["eval_mode"], mode);
        assert!(manifest["artifacts"]["report.json"].is_string());
    }

    let o = run("acf", &cfg, &gls, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let acf = std::fs::read_to_string(gls.join("acf.csv")).unwrap();
    assert!(acf.starts_with("series_id,lag,acf,band"));
    assert_eq!(acf.lines().count(), 1 + 3 * 6);
    assert!(gls.join("acf-calibrated.csv").is_file());

    let naive = dir.path().join("naive");
    let o = run("evaluate", &cfg, &naive, &["eval_mode=seasonal-naive"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(naive.join("report.json").is_file());
}

#[test]
fn evaluation_is_reproducible_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let model = dir.path().join("m");
    assert!(run("train", &cfg, &model, &[]).status.success());
    let ckpt = format!("checkpoint={}", model.join("checkpoint.json").display());
    let mut reports = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(format!("e{threads}"));
        let o = batchcast(&["evaluate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--set", &ckpt], Some(threads));
        assert!(o.status.success(), "{}", stderr(&o));
        reports.push(std::fs::read(out.join("report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn mismatched_checkpoint_exits_with_five() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let model = dir.path().join("m");
    assert!(run("train", &cfg, &model, &[]).status.success());
    let ckpt = format!("checkpoint={}", model.join("checkpoint.json").display());
    let o = run("evaluate", &cfg, &dir.path().join("e"), &[&ckpt, "hidden=7"]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).contains("gru.0"), "{}", stderr(&o));
}
