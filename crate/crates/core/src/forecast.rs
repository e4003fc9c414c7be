//! Rolling multi-step sampling, with optional conditioning of each step's
//! error on the trailing residuals.

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corrmodel::{conditional_error_dist, mix_correlation, KernelBank, MixWeights};
use crate::data::{window_inputs, Split, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::metrics::{quantile_sorted, EvalAccumulator, EvalReport};
use crate::net::{GaussianStepParams, HiddenState, Heads, Network};
use crate::training::TrainedModel;

/// How each sampled step's normalized error is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForecastMode {
    /// Independent standard normal errors.
    Iid,
    /// Errors conditioned on the trailing residuals through the learned correlation.
    Calibrated,
}

impl std::str::FromStr for ForecastMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iid" => Ok(ForecastMode::Iid),
            "calibrated" => Ok(ForecastMode::Calibrated),
            other => Err(Error::Config(format!("unknown forecast mode `{other}` (expected iid or calibrated)"))),
        }
    }
}

/// Which mixture weights condition each rollout step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightSchedule {
    /// Weights recomputed from the hidden state at every step.
    #[default]
    Sliding,
    /// The first forecast step's weights reused for the whole horizon.
    Anchored,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Observed,
    Sampled,
}

/// The most recent normalized residuals, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBuffer {
    capacity: usize,
    entries: VecDeque<(f64, Provenance)>,
}

impl ResidualBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, entries: VecDeque::with_capacity(capacity) }
    }

    pub fn push(&mut self, eps: f64, provenance: Provenance) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((eps, provenance));
    }

    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.0).collect()
    }

    pub fn provenance(&self) -> Vec<Provenance> {
        self.entries.iter().map(|e| e.1).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// Minimum history length for a model with context `p` and depth `d`.
pub fn required_history(p: usize, d: usize) -> usize {
    p.max(d.saturating_sub(1)) + 1
}

/// Output of the network at the final step of the window ending at `target`,
/// with the window truncated at the series start when needed.
fn one_step_params(net: &Network, ds: &TimeSeriesDataset, series: usize, target: usize, context: usize) -> Result<GaussianStepParams> {
    let inputs = window_inputs(ds, series, target, context.min(target));
    let trace = net.unroll_traced(&inputs, None, Heads::Last)?;
    Ok(trace.last_output().expect("final step evaluates heads").clone())
}

/// Encodes the observed history `[0, end)` of one standardized series.
///
/// Returns the trailing `D − 1` residuals `(z − μ)/σ` and the recurrent state
/// from which step `end` is predicted.
pub fn teacher_forced_residuals(model: &TrainedModel, ds: &TimeSeriesDataset, series: usize, end: usize) -> Result<(ResidualBuffer, HiddenState)> {
    let (p, d) = (model.config.context, model.config.depth);
    let need = required_history(p, d);
    if end < need || end > ds.series()[series].len() {
        return Err(Error::HistoryTooShort { have: end, need });
    }
    let values = &ds.series()[series].values;
    let mut buf = ResidualBuffer::new(d - 1);
    for s in end + 1 - d..end {
        let out = one_step_params(&model.net, ds, series, s, p)?;
        buf.push((values[s] - out.mu) / out.sigma, Provenance::Observed);
    }
    let inputs = window_inputs(ds, series, end, p);
    let mut state = model.net.zero_state();
    for inp in &inputs[..p] {
        state = model.net.advance_state(&state, inp)?;
    }
    Ok((buf, state))
}

/// Conditional mean and variance of one step given the buffered residuals.
pub fn calibrated_step(mu: f64, sigma: f64, weights: &MixWeights<f64>, buf: &[f64], bank: &KernelBank<f64>) -> Result<(f64, f64)> {
    if !(sigma > 0.0) {
        return Err(Error::NonpositiveSigma(sigma));
    }
    let c = mix_correlation(bank, weights)?;
    let g = conditional_error_dist(&c, buf)?;
    Ok((mu + sigma * g.mean, sigma * sigma * g.variance))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastOptions {
    pub horizon: usize,
    pub n_samples: usize,
    pub mode: ForecastMode,
    pub seed: u64,
    pub weights: WeightSchedule,
    /// Start every trajectory from the observed residuals; otherwise from an empty buffer.
    pub reset_buffer_per_sample: bool,
}

impl ForecastOptions {
    pub fn new(horizon: usize, mode: ForecastMode) -> Self {
        Self { horizon, n_samples: 100, mode, seed: 0, weights: WeightSchedule::Sliding, reset_buffer_per_sample: true }
    }
}

/// Predictive mean and variance of one step in original units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDistribution {
    pub mean: f64,
    pub variance: f64,
}

pub const QUANTILE_LEVELS: [f64; 19] = [0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

/// Sample trajectories for one series and start index.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastResult {
    pub series: usize,
    /// Index of the first forecast step.
    pub start: usize,
    /// `[sample][step]`, original units.
    pub samples: Vec<Vec<f64>>,
    /// `[sample][step]` conditional distributions the samples were drawn from.
    pub steps: Vec<Vec<StepDistribution>>,
    /// `[step][level]` over [`QUANTILE_LEVELS`].
    pub quantiles: Vec<Vec<f64>>,
}

impl ForecastResult {
    pub fn step_samples(&self, step: usize) -> Vec<f64> {
        self.samples.iter().map(|t| t[step]).collect()
    }
}

/// Per-(series, start) stream seed derived with a SplitMix64 finalizer.
pub fn derive_seed(seed: u64, series: usize, start: usize) -> u64 {
    let mut z = seed ^ (series as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (start as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Samples `n_samples` trajectories of `horizon` steps after history `[0, start)`
/// of the standardized dataset `ds`.
pub fn rolling_forecast(model: &TrainedModel, ds: &TimeSeriesDataset, series: usize, start: usize, opts: &ForecastOptions) -> Result<ForecastResult> {
    if opts.horizon == 0 || opts.n_samples == 0 {
        return Err(Error::Config("forecast horizon and sample count must be positive".into()));
    }
    let (prefix_buf, prefix_state) = teacher_forced_residuals(model, ds, series, start)?;
    let last_obs = ds.series()[series].values[start - 1];
    let scaler = model.scalers.get(series);
    let calibrate = opts.mode == ForecastMode::Calibrated && model.bank.is_some();
    let net = &model.net;

    let trajectories: Vec<(Vec<f64>, Vec<StepDistribution>)> = (0..opts.n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(i as u64);
            let mut buf = prefix_buf.clone();
            if !opts.reset_buffer_per_sample {
                buf.clear();
            }
            let mut state = prefix_state.clone();
            let mut lag = last_obs;
            let mut anchored: Option<MixWeights<f64>> = None;
            let mut values = Vec::with_capacity(opts.horizon);
            let mut steps = Vec::with_capacity(opts.horizon);
            for q in 0..opts.horizon {
                let input = ds.step_input(series, start + q, lag);
                let (next, out) = net.forward_step(&state, &input)?;
                state = next;
                let nu: f64 = rng.sample(StandardNormal);
                let (mean, var, eps) = match (calibrate, model.bank.as_ref()) {
                    (true, Some(bank)) => {
                        let w = match opts.weights {
                            WeightSchedule::Sliding => out.weights.clone(),
                            WeightSchedule::Anchored => anchored.get_or_insert_with(|| out.weights.clone()).clone(),
                        };
                        let c = mix_correlation(bank, &w)?;
                        let g = conditional_error_dist(&c, &buf.values())?;
                        let eps = g.mean + g.variance.sqrt() * nu;
                        (out.mu + out.sigma * g.mean, out.sigma * out.sigma * g.variance, eps)
                    }
                    _ => (out.mu, out.sigma * out.sigma, nu),
                };
                let z = out.mu + out.sigma * eps;
                buf.push(eps, Provenance::Sampled);
                lag = z;
                values.push(scaler.inverse(z));
                steps.push(StepDistribution { mean: scaler.inverse(mean), variance: var * scaler.std * scaler.std });
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::DivergedLoss { epoch: 0, batch: i, loss: f64::NAN });
            }
            Ok((values, steps))
        })
        .collect::<Result<_>>()?;

    let (samples, steps): (Vec<_>, Vec<_>) = trajectories.into_iter().unzip();
    let quantiles = (0..opts.horizon)
        .map(|q| {
            let mut col: Vec<f64> = samples.iter().map(|t: &Vec<f64>| t[q]).collect();
            col.sort_by(f64::total_cmp);
            QUANTILE_LEVELS.iter().map(|&r| quantile_sorted(&col, r)).collect()
        })
        .collect();
    Ok(ForecastResult { series, start, samples, steps, quantiles })
}

/// Teacher-forced one-step normalized residuals over `span`: the raw
/// `(z − μ)/σ` and, when a kernel bank is present, the conditioned
/// `(z − μ̄)/σ̄` using the observed residuals of the previous `D − 1` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct OneStepResiduals {
    pub raw: Vec<f64>,
    pub calibrated: Vec<f64>,
    pub variance_ratio: Vec<f64>,
}

pub fn one_step_residuals(model: &TrainedModel, ds: &TimeSeriesDataset, series: usize, span: std::ops::Range<usize>) -> Result<OneStepResiduals> {
    let (p, d) = (model.config.context, model.config.depth);
    let need = required_history(p, d);
    if span.start < need {
        return Err(Error::HistoryTooShort { have: span.start, need });
    }
    let values = &ds.series()[series].values;
    let first = span.start + 1 - d;
    let outs: Vec<GaussianStepParams> = (first..span.end).into_par_iter().map(|t| one_step_params(&model.net, ds, series, t, p)).collect::<Result<_>>()?;
    let raw_all: Vec<f64> = outs.iter().zip(first..).map(|(o, t)| (values[t] - o.mu) / o.sigma).collect();
    let mut out = OneStepResiduals { raw: Vec::new(), calibrated: Vec::new(), variance_ratio: Vec::new() };
    for (k, t) in span.clone().enumerate() {
        let i = k + d - 1;
        let o = &outs[i];
        out.raw.push(raw_all[i]);
        match &model.bank {
            Some(bank) => {
                let (mean, var) = calibrated_step(o.mu, o.sigma, &o.weights, &raw_all[i + 1 - d..i], bank)?;
                out.calibrated.push((values[t] - mean) / var.sqrt());
                out.variance_ratio.push(var / (o.sigma * o.sigma));
            }
            None => {
                out.calibrated.push(raw_all[i]);
                out.variance_ratio.push(1.0);
            }
        }
    }
    Ok(out)
}

/// Mixture weights from teacher-forced one-step windows ending at each index of `span`.
pub fn weight_trajectory(model: &TrainedModel, ds: &TimeSeriesDataset, series: usize, span: std::ops::Range<usize>) -> Result<Vec<Vec<f64>>> {
    let p = model.config.context;
    span.into_par_iter().map(|t| Ok(one_step_params(&model.net, ds, series, t, p)?.weights.into_inner())).collect()
}

/// Rolling evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RollingSpec {
    pub starts: usize,
    /// Steps between consecutive forecast starts.
    pub stride: usize,
}

impl RollingSpec {
    /// Length of the test (and validation) span holding all starts.
    pub fn span(&self, horizon: usize) -> usize {
        horizon + (self.starts.max(1) - 1) * self.stride
    }
}

/// Forecast start indices of one series: the first lies at the test split start.
pub fn rolling_starts(ds: &TimeSeriesDataset, series: usize, spec: &RollingSpec, horizon: usize) -> Result<Vec<usize>> {
    let s = &ds.series()[series];
    let test = s.span(Split::Test).ok_or_else(|| Error::Config(format!("series `{}` has no split marks", s.id)))?;
    let starts: Vec<usize> = (0..spec.starts).map(|r| test.start + r * spec.stride).filter(|&t| t + horizon <= s.len()).collect();
    if starts.len() < spec.starts {
        return Err(Error::SeriesTooShort { series: s.id.clone(), have: s.len(), need: test.start + spec.span(horizon) });
    }
    Ok(starts)
}

/// Forecasts every rolling start of every series of `raw` (original units,
/// with split marks) and scores them.
pub fn evaluate(model: &TrainedModel, raw: &TimeSeriesDataset, opts: &ForecastOptions, spec: &RollingSpec) -> Result<(Vec<ForecastResult>, EvalReport)> {
    let std_ds = model.scalers.apply(raw)?;
    let mut acc = EvalAccumulator::new(raw.series().iter().map(|s| s.id.clone()).collect());
    let mut results = Vec::new();
    for k in 0..raw.n_series() {
        for start in rolling_starts(raw, k, spec, opts.horizon)? {
            let o = ForecastOptions { seed: derive_seed(opts.seed, k, start), ..opts.clone() };
            let r = rolling_forecast(model, &std_ds, k, start, &o)?;
            for q in 0..opts.horizon {
                acc.add_samples(k, raw.series()[k].values[start + q], &r.step_samples(q))?;
            }
            results.push(r);
        }
    }
    let mut meta = BTreeMap::new();
    meta.insert("mode".to_string(), serde_json::to_value(opts.mode)?);
    meta.insert("train_mode".to_string(), serde_json::to_value(model.config.mode)?);
    meta.insert("seed".to_string(), opts.seed.into());
    meta.insert("n_samples".to_string(), opts.n_samples.into());
    meta.insert("rolling_starts".to_string(), spec.starts.into());
    meta.insert("horizon".to_string(), opts.horizon.into());
    Ok((results, acc.finish(meta)?))
}

/// Scores the forecast "value one season earlier" over the same rolling starts.
pub fn evaluate_seasonal_naive(raw: &TimeSeriesDataset, horizon: usize, spec: &RollingSpec) -> Result<EvalReport> {
    let season = raw.granularity().season();
    let mut acc = EvalAccumulator::new(raw.series().iter().map(|s| s.id.clone()).collect());
    for k in 0..raw.n_series() {
        let v = &raw.series()[k].values;
        for start in rolling_starts(raw, k, spec, horizon)? {
            if start < season {
                return Err(Error::HistoryTooShort { have: start, need: season });
            }
            for q in 0..horizon {
                // beyond one season ahead, repeat the last observed season
                let src = start - season + q % season;
                acc.add_point(k, v[start + q], v[src]);
            }
        }
    }
    let mut meta = BTreeMap::new();
    meta.insert("mode".to_string(), "seasonal-naive".into());
    meta.insert("season".to_string(), season.into());
    meta.insert("rolling_starts".to_string(), spec.starts.into());
    meta.insert("horizon".to_string(), horizon.into());
    acc.finish(meta)
}
