use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use batchcast::checkpoint;
use batchcast::data::{load_dataset, synth_ar, write_long_csv, Split, TimeSeriesDataset};
use batchcast::forecast::{evaluate, evaluate_seasonal_naive, one_step_residuals, weight_trajectory, ForecastResult, QUANTILE_LEVELS};
use batchcast::metrics::{acf, acf_pooled, Acf, EvalReport};
use batchcast::training::{train, TrainedModel};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{EvalMode, ExperimentConfig};
use crate::CliError;

/// Output directory plus the files written into it, in write order.
struct Run {
    out: PathBuf,
    artifacts: Vec<String>,
}

impl Run {
    fn new(out: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(out).map_err(|e| CliError::Config(format!("cannot create output directory {}: {e}", out.display())))?;
        Ok(Self { out: out.to_path_buf(), artifacts: Vec::new() })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
        std::fs::write(self.path(name), contents).map_err(|e| CliError::Output(name.to_string(), e))?;
        self.record(name);
        Ok(())
    }

    fn record(&mut self, name: &str) {
        if !self.artifacts.iter().any(|a| a == name) {
            self.artifacts.push(name.to_string());
        }
    }

    fn finish(self, command: &str, cfg: &ExperimentConfig) -> Result<(), CliError> {
        let mut checksums = BTreeMap::new();
        for name in &self.artifacts {
            let bytes = std::fs::read(self.path(name)).map_err(|e| CliError::Output(name.clone(), e))?;
            checksums.insert(name.clone(), hex::encode(Sha256::digest(&bytes)));
        }
        let manifest = Manifest { command, version: env!("CARGO_PKG_VERSION"), seed: cfg.seed, config: cfg, artifacts: checksums };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(self.path("run-manifest.json"), text).map_err(|e| CliError::Output("run-manifest.json".into(), e))
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config: &'a ExperimentConfig,
    artifacts: BTreeMap<String, String>,
}

fn csv_text(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| CliError::Config(format!("csv encoding: {e}"));
    w.write_record(header).map_err(to_err)?;
    for r in rows {
        w.write_record(&r).map_err(to_err)?;
    }
    w.into_inner().map_err(|e| CliError::Config(format!("csv encoding: {e}")))
}

/// Dataset with splits sized for the configured rolling evaluation.
fn split_dataset(cfg: &ExperimentConfig) -> Result<TimeSeriesDataset, CliError> {
    let ds = load_dataset(cfg.dataset_path()?, cfg.format, cfg.granularity)?;
    Ok(ds.with_splits(cfg.rolling().span(cfg.horizon))?)
}

fn load_model(cfg: &ExperimentConfig, out: &Path, ds: &TimeSeriesDataset) -> Result<TrainedModel, CliError> {
    let path = cfg.checkpoint.clone().unwrap_or_else(|| out.join("checkpoint.json"));
    if !path.is_file() {
        return Err(CliError::Config(format!("checkpoint {} does not exist", path.display())));
    }
    let model = checkpoint::load(&path)?;
    checkpoint::check_compatible(&model, &cfg.net_config(ds), &cfg.train_config())?;
    if model.scalers.ids.len() != ds.n_series() {
        return Err(batchcast::Error::Checkpoint(format!("checkpoint covers {} series, dataset has {}", model.scalers.ids.len(), ds.n_series())).into());
    }
    Ok(model)
}

pub fn synth(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let ds = synth_ar(&cfg.synth_config())?;
    let mut run = Run::new(out)?;
    write_long_csv(&ds, run.path("synth.csv"))?;
    run.record("synth.csv");
    run.finish("synth", cfg)?;
    println!("wrote {} series x {} steps (phi {}) to {}", cfg.n_series, cfg.length, cfg.phi, run_path(out, "synth.csv"));
    Ok(())
}

pub fn train_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let ds = split_dataset(cfg)?;
    let train_cfg = cfg.train_config();
    let (model, history) = train(&train_cfg, cfg.net_config(&ds), &ds)?;
    let mut run = Run::new(out)?;
    run.write("checkpoint.json", checkpoint::to_json(&model)?)?;
    run.write("history.csv", history.to_csv())?;
    run.finish("train", cfg)?;
    println!(
        "{} training: {} epochs, best epoch {} (validation loss {:.6}){}",
        train_cfg.mode,
        history.epochs.len(),
        history.best_epoch,
        history.best_val_loss,
        if history.stopped_early { ", stopped early" } else { "" }
    );
    Ok(())
}

pub fn evaluate_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let ds = split_dataset(cfg)?;
    let spec = cfg.rolling();
    if cfg.eval_mode == EvalMode::SeasonalNaive {
        let report = evaluate_seasonal_naive(&ds, cfg.horizon, &spec)?;
        let mut run = Run::new(out)?;
        write_report(&mut run, &report)?;
        return run.finish("evaluate", cfg);
    }
    let model = load_model(cfg, out, &ds)?;
    if cfg.eval_mode == EvalMode::Calibrated && model.bank.is_none() {
        eprintln!("warning: checkpoint has no correlation model; calibrated evaluation falls back to iid sampling");
    }
    let (results, report) = evaluate(&model, &ds, &cfg.forecast_options(), &spec)?;
    let mut run = Run::new(out)?;
    write_report(&mut run, &report)?;
    run.write("forecasts.csv", forecast_rows(&ds, &results)?)?;
    run.write("quantiles.csv", quantile_rows(&ds, &results)?)?;
    if model.bank.is_some() {
        run.write("weights.csv", weight_rows(&model, &ds)?)?;
    }
    run.finish("evaluate", cfg)
}

pub fn acf_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let ds = split_dataset(cfg)?;
    let model = load_model(cfg, out, &ds)?;
    let std_ds = model.scalers.apply(&ds)?;
    let mut raw = Vec::new();
    let mut calibrated = Vec::new();
    for k in 0..ds.n_series() {
        let span = ds.series()[k].span(Split::Test).expect("splits assigned");
        let r = one_step_residuals(&model, &std_ds, k, span)?;
        raw.push(r.raw);
        calibrated.push(r.calibrated);
    }
    let mut run = Run::new(out)?;
    run.write("acf.csv", acf_rows(&ds, &raw, cfg.acf_max_lag)?)?;
    if model.bank.is_some() {
        run.write("acf-calibrated.csv", acf_rows(&ds, &calibrated, cfg.acf_max_lag)?)?;
    }
    run.finish("acf", cfg)?;
    let pooled = acf_pooled(&raw, 1)?;
    println!("pooled lag-1 autocorrelation of one-step residuals: {:.4} (band ±{:.4})", pooled.values[1], pooled.band);
    Ok(())
}

fn run_path(out: &Path, name: &str) -> String {
    out.join(name).display().to_string()
}

fn write_report(run: &mut Run, report: &EvalReport) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(report).map_err(batchcast::Error::from)?;
    run.write("report.json", text)?;
    println!("normalized CRPS {:.6}, risk_0.5 {:.6}, risk_0.9 {:.6}, MSE {:.6}", report.scores.crps, report.scores.risk_05, report.scores.risk_09, report.scores.mse);
    Ok(())
}

fn forecast_rows(ds: &TimeSeriesDataset, results: &[ForecastResult]) -> Result<Vec<u8>, CliError> {
    let rows = results.iter().flat_map(|r| {
        let id = &ds.series()[r.series].id;
        let start = ds.label(r.series, r.start);
        r.samples.iter().enumerate().flat_map(move |(i, traj)| {
            let start = start.clone();
            traj.iter().enumerate().map(move |(q, v)| vec![id.clone(), start.clone(), (q + 1).to_string(), i.to_string(), v.to_string()])
        })
    });
    csv_text(&["series_id", "start", "step", "sample_idx", "value"], rows)
}

fn quantile_rows(ds: &TimeSeriesDataset, results: &[ForecastResult]) -> Result<Vec<u8>, CliError> {
    let rows = results.iter().flat_map(|r| {
        let id = &ds.series()[r.series].id;
        let start = ds.label(r.series, r.start);
        r.quantiles.iter().enumerate().flat_map(move |(q, row)| {
            let start = start.clone();
            row.iter().zip(QUANTILE_LEVELS).map(move |(v, rho)| vec![id.clone(), start.clone(), (q + 1).to_string(), rho.to_string(), v.to_string()])
        })
    });
    csv_text(&["series_id", "start", "step", "rho", "value"], rows)
}

/// Mixture weights the model emits at every step of each series' test span.
fn weight_rows(model: &TrainedModel, ds: &TimeSeriesDataset) -> Result<Vec<u8>, CliError> {
    let std_ds = model.scalers.apply(ds)?;
    let m = model.bank.as_ref().map_or(0, |b| b.len());
    let mut header = vec!["series_id".to_string(), "step".to_string()];
    header.extend((0..m).map(|i| format!("w_{i}")));
    let mut rows = Vec::new();
    for k in 0..ds.n_series() {
        let span = ds.series()[k].span(Split::Test).expect("splits assigned");
        let first = span.start;
        for (j, w) in weight_trajectory(model, &std_ds, k, span)?.into_iter().enumerate() {
            let mut row = vec![ds.series()[k].id.clone(), ds.label(k, first + j)];
            row.extend(w.iter().map(f64::to_string));
            rows.push(row);
        }
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    csv_text(&header, rows)
}

fn acf_rows(ds: &TimeSeriesDataset, residuals: &[Vec<f64>], max_lag: usize) -> Result<Vec<u8>, CliError> {
    let mut rows = Vec::new();
    let mut push = |id: &str, a: &Acf| {
        for (lag, v) in a.values.iter().enumerate() {
            rows.push(vec![id.to_string(), lag.to_string(), v.to_string(), a.band.to_string()]);
        }
    };
    for (s, r) in ds.series().iter().zip(residuals) {
        push(&s.id, &acf(r, max_lag)?);
    }
    push("pooled", &acf_pooled(residuals, max_lag)?);
    csv_text(&["series_id", "lag", "acf", "band"], rows)
}
