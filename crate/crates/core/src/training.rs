//! Adam optimization with early stopping for the i.i.d. and batch-GLS objectives.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corrmodel::{build_kernel_bank, KernelBank, DEFAULT_LENGTHSCALES};
use crate::data::{split_minibatches, standardize, Granularity, MiniBatch, ScalerTable, Split, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::gradengine::{accumulate_gradients, backprop_gls, backprop_iid, StepPartials};
use crate::net::{Heads, NetConfig, Network};
use crate::params::{GradSet, ParamSet};

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Independent Gaussian likelihood per target.
    Iid,
    /// Joint Gaussian likelihood over each mini-batch with a learned correlation.
    Gls,
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Iid => "iid",
            TrainMode::Gls => "gls",
        })
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iid" => Ok(TrainMode::Iid),
            "gls" => Ok(TrainMode::Gls),
            other => Err(Error::Config(format!("unknown training mode `{other}` (expected iid or gls)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Conditioning range `P`.
    pub context: usize,
    /// Correlation window `D`.
    pub depth: usize,
    /// Prediction range `Q`.
    pub horizon: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub max_batches_per_epoch: usize,
    pub lr: f64,
    pub patience: usize,
    pub seed: u64,
    /// Global gradient norm above which gradients are rescaled.
    pub clip_norm: f64,
    /// Lower bound on σ inside the likelihood.
    pub sigma_floor: f64,
    /// Step between consecutive training mini-batches of one series.
    pub stride: usize,
    pub lengthscales: Vec<f64>,
}

impl TrainConfig {
    /// Defaults with `P = D = Q = horizon`.
    pub fn new(mode: TrainMode, horizon: usize) -> Self {
        Self {
            mode,
            context: horizon,
            depth: horizon,
            horizon,
            batch_size: 64,
            max_epochs: 100,
            max_batches_per_epoch: 100,
            lr: 1e-3,
            patience: 10,
            seed: 0,
            clip_norm: 10.0,
            sigma_floor: 1e-4,
            stride: 1,
            lengthscales: DEFAULT_LENGTHSCALES.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("context", self.context),
            ("depth", self.depth),
            ("horizon", self.horizon),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("max_batches_per_epoch", self.max_batches_per_epoch),
            ("stride", self.stride),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.mode == TrainMode::Gls && self.depth < 2 {
            return Err(Error::Config("gls mode requires depth >= 2".into()));
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) || !(self.sigma_floor > 0.0) {
            return Err(Error::Config("lr, clip_norm, and sigma_floor must be positive".into()));
        }
        Ok(())
    }

    /// Kernel bank over the correlation window (absent when `D = 1`).
    pub fn bank(&self) -> Result<Option<KernelBank<f64>>> {
        if self.depth < 2 {
            return Ok(None);
        }
        build_kernel_bank(self.depth, &self.lengthscales).map(Some)
    }

    /// Number of mixture components emitted by the weight head.
    pub fn components(&self) -> usize {
        self.lengthscales.len() + 1
    }
}

/// Adam moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl OptState {
    pub fn new(params: &ParamSet) -> Self {
        Self { m: vec![0.0; params.len()], v: vec![0.0; params.len()], t: 0 }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut ParamSet, grads: &GradSet, opt: &mut OptState, lr: f64) -> Result<()> {
    if !grads.is_congruent(params) || opt.m.len() != params.len() || opt.v.len() != params.len() {
        return Err(Error::ShapeMismatch("optimizer state, gradients, and parameters differ in shape".into()));
    }
    opt.t += 1;
    let t = opt.t as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (((p, &g), m), v) in params.as_mut_slice().iter_mut().zip(grads.as_slice()).zip(&mut opt.m).zip(&mut opt.v) {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *p -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Outcome of feeding one validation loss to [`EarlyStopping`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience-based early stopping on a loss to be minimized.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: Option<usize>,
    pub wait: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: None, wait: 0 }
    }

    pub fn update(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.wait = 0;
            return StopDecision::Improved;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

/// One row of `history.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    /// Optimizer steps whose gradient was rescaled by clipping.
    pub clipped: usize,
    pub batches: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,lr,clipped\n");
        for r in &self.epochs {
            out.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.lr, r.clipped));
        }
        out
    }
}

/// A trained network with everything needed to forecast in original units.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub net: Network,
    pub config: TrainConfig,
    pub scalers: ScalerTable,
    pub granularity: Granularity,
    pub bank: Option<KernelBank<f64>>,
}

impl TrainedModel {
    pub fn new(net: Network, config: TrainConfig, scalers: ScalerTable, granularity: Granularity) -> Result<Self> {
        config.validate()?;
        let bank = config.bank()?;
        if net.config().components != config.components() {
            return Err(Error::WeightDimensionMismatch { expected: config.components(), got: net.config().components });
        }
        Ok(Self { net, config, scalers, granularity, bank })
    }
}

/// Network architecture matching a dataset's series count and covariates.
pub fn net_config_for(ds: &TimeSeriesDataset, cfg: &TrainConfig) -> NetConfig {
    let mut net = NetConfig::new(ds.n_series(), cfg.components());
    if !ds.granularity().has_hour() {
        net.hour_embedding = 0;
    }
    if !ds.granularity().has_dow() {
        net.dow_embedding = 0;
    }
    net
}

/// Loss of one mini-batch under `mode`, optionally accumulating its gradient.
pub fn minibatch_loss(
    net: &Network,
    bank: Option<&KernelBank<f64>>,
    ds: &TimeSeriesDataset,
    batch: &MiniBatch,
    mode: TrainMode,
    sigma_floor: f64,
    grads: Option<&mut GradSet>,
) -> Result<f64> {
    let d = batch.depth;
    let mut traces = Vec::with_capacity(d);
    let (mut mu, mut sigma, mut raw_sigma) = (Vec::with_capacity(d), Vec::with_capacity(d), Vec::with_capacity(d));
    for k in 0..d {
        let w = batch.window(ds, k);
        let trace = net.unroll_traced(&w.inputs, None, Heads::Last)?;
        let out = trace.last_output().expect("final step evaluates heads");
        mu.push(out.mu);
        raw_sigma.push(out.sigma);
        sigma.push(out.sigma.max(sigma_floor));
        traces.push(trace);
    }
    let z = batch.targets(ds);
    let (loss, dmu, dsigma, dw) = match mode {
        TrainMode::Iid => {
            let mut loss = 0.0;
            let (mut dmu, mut dsigma) = (vec![0.0; d], vec![0.0; d]);
            for k in 0..d {
                let p = backprop_iid(mu[k], sigma[k], z[k])?;
                loss += p.loss;
                dmu[k] = p.dmu;
                dsigma[k] = p.dsigma;
            }
            (loss, dmu, dsigma, None)
        }
        TrainMode::Gls => {
            let bank = bank.ok_or_else(|| Error::Config("gls loss requires a kernel bank".into()))?;
            let weights = traces[d - 1].last_output().expect("final step evaluates heads").weights.clone();
            let p = backprop_gls(&mu, &sigma, weights.as_slice(), &z, bank)?;
            (p.loss, p.dmu, p.dsigma, Some(p.dw))
        }
    };
    if let Some(g) = grads {
        for (k, trace) in traces.iter().enumerate() {
            let mut partials = vec![StepPartials::default(); trace.len()];
            let last = partials.last_mut().expect("nonempty window");
            last.dmu = dmu[k];
            last.dsigma = if raw_sigma[k] > sigma_floor { dsigma[k] } else { 0.0 };
            if k == d - 1 {
                last.dw = dw.clone();
            }
            accumulate_gradients(net, trace, &partials, g)?;
        }
    }
    Ok(loss)
}

/// Mean loss over mini-batches (no gradients).
pub fn mean_loss(net: &Network, bank: Option<&KernelBank<f64>>, ds: &TimeSeriesDataset, batches: &[MiniBatch], mode: TrainMode, sigma_floor: f64) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::Config("no mini-batches to evaluate".into()));
    }
    let losses: Vec<f64> = batches.par_iter().map(|b| minibatch_loss(net, bank, ds, b, mode, sigma_floor, None)).collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Mean loss and gradient over one optimizer batch; the reduction order is
/// fixed, so results do not depend on the worker count.
fn batch_gradient(net: &Network, bank: Option<&KernelBank<f64>>, ds: &TimeSeriesDataset, batch: &[MiniBatch], cfg: &TrainConfig) -> Result<(f64, GradSet)> {
    let parts: Vec<(f64, GradSet)> = batch
        .par_iter()
        .map(|b| {
            let mut g = GradSet::zeros_like(net.params());
            let loss = minibatch_loss(net, bank, ds, b, cfg.mode, cfg.sigma_floor, Some(&mut g))?;
            Ok((loss, g))
        })
        .collect::<Result<_>>()?;
    let mut total = GradSet::zeros_like(net.params());
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        total.accumulate(g)?;
    }
    let n = batch.len() as f64;
    total.scale(1.0 / n);
    Ok((loss / n, total))
}

/// Trains on the training split with validation-based early stopping and
/// restores the parameters of the best validation epoch.
///
/// `ds` must carry split marks; standardization is fitted here.
pub fn train(cfg: &TrainConfig, net_config: NetConfig, ds: &TimeSeriesDataset) -> Result<(TrainedModel, History)> {
    cfg.validate()?;
    let (std_ds, scalers) = standardize(ds)?;
    let bank = cfg.bank()?;
    let train_batches = split_minibatches(&std_ds, Split::Train, cfg.context, cfg.depth, cfg.stride)?;
    let val_batches = split_minibatches(&std_ds, Split::Validation, cfg.context, cfg.depth, 1)?;
    let mut net = Network::new(net_config, cfg.seed)?;
    let mut opt = OptState::new(net.params());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_params = net.params().clone();
    let mut history = History::default();
    let mut order = train_batches.clone();

    for epoch in 1..=cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.clone_from(&train_batches);
        order.shuffle(&mut rng);
        let take = order.len().min(cfg.batch_size * cfg.max_batches_per_epoch);
        let (mut loss_sum, mut batches, mut clipped) = (0.0, 0, 0);
        for (b, chunk) in order[..take].chunks(cfg.batch_size).enumerate() {
            let (loss, mut grads) = batch_gradient(&net, bank.as_ref(), &std_ds, chunk, cfg)?;
            if !loss.is_finite() {
                return Err(Error::DivergedLoss { epoch, batch: b + 1, loss });
            }
            let norm = grads.global_norm();
            if !norm.is_finite() {
                return Err(Error::DivergedLoss { epoch, batch: b + 1, loss: norm });
            }
            if norm > cfg.clip_norm {
                grads.scale(cfg.clip_norm / norm);
                clipped += 1;
            }
            adam_step(net.params_mut(), &grads, &mut opt, cfg.lr)?;
            loss_sum += loss;
            batches += 1;
        }
        let val_loss = mean_loss(&net, bank.as_ref(), &std_ds, &val_batches, cfg.mode, cfg.sigma_floor)?;
        if !val_loss.is_finite() {
            return Err(Error::DivergedLoss { epoch, batch: 0, loss: val_loss });
        }
        history.epochs.push(EpochRecord { epoch, train_loss: loss_sum / batches as f64, val_loss, lr: cfg.lr, clipped, batches });
        match stopper.update(epoch, val_loss) {
            StopDecision::Improved => best_params = net.params().clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                history.stopped_early = true;
                break;
            }
        }
    }
    *net.params_mut() = best_params;
    history.best_epoch = stopper.best_epoch.unwrap_or(0);
    history.best_val_loss = stopper.best;
    let model = TrainedModel { net, config: cfg.clone(), scalers, granularity: ds.granularity(), bank };
    Ok((model, history))
}

/// Mean loss of a trained model over one split, in standardized units.
pub fn split_loss(model: &TrainedModel, ds: &TimeSeriesDataset, split: Split, mode: TrainMode) -> Result<f64> {
    let std_ds = model.scalers.apply(ds)?;
    let batches = split_minibatches(&std_ds, split, model.config.context, model.config.depth, 1)?;
    mean_loss(&model.net, model.bank.as_ref(), &std_ds, &batches, mode, model.config.sigma_floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_protocol() {
        let c = TrainConfig::new(TrainMode::Gls, 24);
        assert_eq!((c.batch_size, c.max_epochs, c.max_batches_per_epoch, c.patience), (64, 100, 100, 10));
        assert_eq!(c.lr, 1e-3);
        assert_eq!((c.context, c.depth, c.horizon), (24, 24, 24));
        assert!(TrainConfig { depth: 1, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { depth: 1, mode: TrainMode::Iid, ..c }.validate().is_ok());
    }

    fn params(values: Vec<f64>) -> ParamSet {
        let layout = std::sync::Arc::new(crate::params::Layout::new(vec![crate::params::ParamSpec { name: "x".into(), shape: vec![values.len()] }]));
        ParamSet::from_flat(layout, values).unwrap()
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut p = params(vec![1.0, -2.0, 3.5]);
        let before = p.clone();
        let mut opt = OptState::new(&p);
        let g = GradSet::zeros_like(&p);
        for _ in 0..5 {
            adam_step(&mut p, &g, &mut opt, 1e-3).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        let mut p = params(vec![0.0; 3]);
        let mut opt = OptState::new(&p);
        let mut g = GradSet::zeros_like(&p);
        g.as_mut_slice().copy_from_slice(&[2.0, -0.5, 1e-3]);
        adam_step(&mut p, &g, &mut opt, 1e-3).unwrap();
        for (&x, &gi) in p.as_slice().iter().zip(g.as_slice()) {
            // lr·g/(|g| + ε)
            let expected = -1e-3 * gi / (gi.abs() + ADAM_EPS);
            assert!((x - expected).abs() < 1e-15);
            assert!((x.abs() - 1e-3).abs() < 1e-7);
        }
    }

    #[test]
    fn adam_matches_reference_recursion() {
        let mut p = params(vec![0.5]);
        let mut opt = OptState::new(&p);
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.5f64);
        for t in 1..=20 {
            let grad = (t as f64).sin();
            let mut g = GradSet::zeros_like(&p);
            g.as_mut_slice()[0] = grad;
            adam_step(&mut p, &g, &mut opt, 0.01).unwrap();
            m = 0.9 * m + 0.1 * grad;
            v = 0.999 * v + 0.001 * grad * grad;
            x -= 0.01 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        }
        assert!((p.as_slice()[0] - x).abs() < 1e-15);
    }

    #[test]
    fn early_stopping_trace() {
        let mut s = EarlyStopping::new(10);
        let mut stopped = None;
        for epoch in 1..=100 {
            let loss = if epoch <= 3 { 10.0 - epoch as f64 } else { 7.0 + epoch as f64 };
            if s.update(epoch, loss) == StopDecision::Stop {
                stopped = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped, Some(13));
        assert_eq!(s.best_epoch, Some(3));
    }

    #[test]
    fn equal_loss_is_not_improvement() {
        let mut s = EarlyStopping::new(2);
        assert_eq!(s.update(1, 1.0), StopDecision::Improved);
        assert_eq!(s.update(2, 1.0), StopDecision::Continue);
        assert_eq!(s.update(3, 1.0), StopDecision::Stop);
    }
}
