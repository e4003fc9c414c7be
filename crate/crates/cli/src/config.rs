//! Flat JSON experiment configuration with `key=value` overrides.

use std::path::{Path, PathBuf};

use batchcast::data::{DataFormat, Granularity, SynthConfig, TimeSeriesDataset};
use batchcast::forecast::{ForecastMode, ForecastOptions, RollingSpec, WeightSchedule};
use batchcast::net::NetConfig;
use batchcast::training::{net_config_for, TrainConfig, TrainMode};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

/// How `evaluate` produces forecasts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    Iid,
    Calibrated,
    SeasonalNaive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: Option<PathBuf>,
    pub format: DataFormat,
    pub granularity: Option<Granularity>,
    pub checkpoint: Option<PathBuf>,
    pub seed: u64,

    pub mode: TrainMode,
    /// Prediction range `Q`; context and depth follow it unless set.
    pub horizon: usize,
    pub context: Option<usize>,
    pub depth: Option<usize>,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub max_batches_per_epoch: usize,
    pub lr: f64,
    pub patience: usize,
    pub clip_norm: f64,
    pub sigma_floor: f64,
    pub train_stride: usize,
    pub lengthscales: Vec<f64>,

    pub hidden: usize,
    pub layers: usize,
    pub series_embedding: usize,
    pub hour_embedding: Option<usize>,
    pub dow_embedding: Option<usize>,
    pub weight_hidden: usize,

    pub eval_mode: EvalMode,
    pub n_samples: usize,
    pub rolling_starts: usize,
    /// Steps between rolling starts; defaults to the horizon.
    pub rolling_stride: Option<usize>,
    pub weight_schedule: WeightSchedule,
    pub reset_buffer_per_sample: bool,

    pub acf_max_lag: usize,

    pub n_series: usize,
    pub length: usize,
    pub phi: f64,
    pub amplitude: f64,
    pub period: usize,
    pub noise_scale: f64,
    pub base_level: f64,
    pub level_spread: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::new(TrainMode::Gls, 24);
        let net = NetConfig::new(1, 1);
        let synth = SynthConfig::default();
        Self {
            dataset: None,
            format: DataFormat::LongCsv,
            granularity: None,
            checkpoint: None,
            seed: 0,
            mode: train.mode,
            horizon: train.horizon,
            context: None,
            depth: None,
            batch_size: train.batch_size,
            max_epochs: train.max_epochs,
            max_batches_per_epoch: train.max_batches_per_epoch,
            lr: train.lr,
            patience: train.patience,
            clip_norm: train.clip_norm,
            sigma_floor: train.sigma_floor,
            train_stride: train.stride,
            lengthscales: train.lengthscales,
            hidden: net.hidden,
            layers: net.layers,
            series_embedding: net.series_embedding,
            hour_embedding: None,
            dow_embedding: None,
            weight_hidden: net.weight_hidden,
            eval_mode: EvalMode::Calibrated,
            n_samples: 100,
            rolling_starts: 7,
            rolling_stride: None,
            weight_schedule: WeightSchedule::Sliding,
            reset_buffer_per_sample: true,
            acf_max_lag: 24,
            n_series: synth.n_series,
            length: synth.length,
            phi: synth.phi,
            amplitude: synth.amplitude,
            period: synth.period,
            noise_scale: synth.noise_scale,
            base_level: synth.base_level,
            level_spread: synth.level_spread,
        }
    }
}

impl ExperimentConfig {
    /// Reads `path`, applies overrides, and resolves relative paths against the file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut doc: Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
        let obj = doc.as_object_mut().ok_or_else(|| CliError::Config("config must be a JSON object".into()))?;
        for o in overrides {
            apply_override(obj, o)?;
        }
        let mut cfg: Self = serde_json::from_value(doc).map_err(|e| CliError::Config(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.dataset, &mut cfg.checkpoint].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn dataset_path(&self) -> Result<&Path, CliError> {
        let p = self.dataset.as_deref().ok_or_else(|| CliError::Config("`dataset` is required".into()))?;
        if !p.is_file() {
            return Err(CliError::Config(format!("dataset {} does not exist", p.display())));
        }
        Ok(p)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            context: self.context.unwrap_or(self.horizon),
            depth: self.depth.unwrap_or(self.horizon),
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            max_batches_per_epoch: self.max_batches_per_epoch,
            lr: self.lr,
            patience: self.patience,
            seed: self.seed,
            clip_norm: self.clip_norm,
            sigma_floor: self.sigma_floor,
            stride: self.train_stride,
            lengthscales: self.lengthscales.clone(),
            ..TrainConfig::new(self.mode, self.horizon)
        }
    }

    pub fn net_config(&self, ds: &TimeSeriesDataset) -> NetConfig {
        let base = net_config_for(ds, &self.train_config());
        NetConfig {
            hidden: self.hidden,
            layers: self.layers,
            series_embedding: self.series_embedding,
            hour_embedding: self.hour_embedding.unwrap_or(base.hour_embedding),
            dow_embedding: self.dow_embedding.unwrap_or(base.dow_embedding),
            weight_hidden: self.weight_hidden,
            ..base
        }
    }

    pub fn rolling(&self) -> RollingSpec {
        RollingSpec { starts: self.rolling_starts, stride: self.rolling_stride.unwrap_or(self.horizon) }
    }

    pub fn forecast_options(&self) -> ForecastOptions {
        let mode = if self.eval_mode == EvalMode::Iid { ForecastMode::Iid } else { ForecastMode::Calibrated };
        ForecastOptions {
            n_samples: self.n_samples,
            seed: self.seed,
            weights: self.weight_schedule,
            reset_buffer_per_sample: self.reset_buffer_per_sample,
            ..ForecastOptions::new(self.horizon, mode)
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            n_series: self.n_series,
            length: self.length,
            phi: self.phi,
            amplitude: self.amplitude,
            period: self.period,
            noise_scale: self.noise_scale,
            base_level: self.base_level,
            level_spread: self.level_spread,
            seed: self.seed,
        }
    }
}

/// `key=value` where the value is JSON if it parses and a bare string otherwise.
fn apply_override(obj: &mut Map<String, Value>, item: &str) -> Result<(), CliError> {
    let (key, raw) = item.split_once('=').ok_or_else(|| CliError::Config(format!("override `{item}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(CliError::Config(format!("override `{item}` has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    obj.insert(key.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("cfg.json");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn context_and_depth_follow_horizon() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::load(&write(dir.path(), r#"{"horizon": 12}"#), &[]).unwrap();
        let t = cfg.train_config();
        assert_eq!((t.context, t.depth, t.horizon), (12, 12, 12));
        let cfg = ExperimentConfig::load(&write(dir.path(), r#"{"horizon": 12, "depth": 4}"#), &["context=6".into()]).unwrap();
        let t = cfg.train_config();
        assert_eq!((t.context, t.depth), (6, 4));
    }

    #[test]
    fn defaults_follow_protocol() {
        let cfg = ExperimentConfig::default();
        let t = cfg.train_config();
        assert_eq!((t.batch_size, t.max_batches_per_epoch, t.max_epochs, t.patience), (64, 100, 100, 10));
        assert_eq!(t.lr, 1e-3);
        assert_eq!(cfg.n_samples, 100);
        assert_eq!(cfg.rolling().stride, cfg.horizon);
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), r#"{"dataset": "d.csv"}"#);
        let cfg = ExperimentConfig::load(&p, &["mode=iid".into(), "eval_mode=seasonal-naive".into(), "lr=0.01".into()]).unwrap();
        assert_eq!(cfg.mode, TrainMode::Iid);
        assert_eq!(cfg.eval_mode, EvalMode::SeasonalNaive);
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.dataset.unwrap(), dir.path().join("d.csv"));
        assert!(matches!(ExperimentConfig::load(&p, &["bogus=1".into()]), Err(CliError::Config(m)) if m.contains("bogus")));
        assert!(matches!(ExperimentConfig::load(&p, &["novalue".into()]), Err(CliError::Config(_))));
    }
}
