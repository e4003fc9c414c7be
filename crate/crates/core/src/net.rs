//! Autoregressive base forecaster.
//!
//! Covariate embeddings and the lagged target feed a stack of gated recurrent
//! cells. The top hidden state is mapped to a Gaussian mean, a softplus
//! standard deviation, and softmax mixture weights for the correlation bank
//! (through one ELU hidden layer).

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corrmodel::MixWeights;
use crate::error::{Error, Result};
use crate::params::{Layout, ParamSet, ParamSpec};

pub const HOURS_PER_DAY: usize = 24;
pub const DAYS_PER_WEEK: usize = 7;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub n_series: usize,
    pub hidden: usize,
    pub layers: usize,
    pub series_embedding: usize,
    /// Zero disables the hour-of-day covariate.
    pub hour_embedding: usize,
    /// Zero disables the day-of-week covariate.
    pub dow_embedding: usize,
    pub weight_hidden: usize,
    pub components: usize,
    /// Fixed mixture weights replacing the weight head's output.
    #[serde(default)]
    pub pinned_weights: Option<Vec<f64>>,
}

impl NetConfig {
    pub fn new(n_series: usize, components: usize) -> Self {
        Self {
            n_series,
            hidden: 40,
            layers: 3,
            series_embedding: 8,
            hour_embedding: 4,
            dow_embedding: 3,
            weight_hidden: 16,
            components,
            pinned_weights: None,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.series_embedding + self.hour_embedding + self.dow_embedding + 1
    }

    fn validate(&self) -> Result<()> {
        if self.n_series == 0 || self.hidden == 0 || self.layers == 0 || self.components == 0 || self.weight_hidden == 0 {
            return Err(Error::Config(format!("degenerate network configuration {self:?}")));
        }
        if let Some(w) = &self.pinned_weights {
            MixWeights::new(w.clone())?;
            if w.len() != self.components {
                return Err(Error::WeightDimensionMismatch { expected: self.components, got: w.len() });
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        let h = self.hidden;
        let mut specs = vec![spec("embed.series", &[self.n_series, self.series_embedding])];
        if self.hour_embedding > 0 {
            specs.push(spec("embed.hour", &[HOURS_PER_DAY, self.hour_embedding]));
        }
        if self.dow_embedding > 0 {
            specs.push(spec("embed.dow", &[DAYS_PER_WEEK, self.dow_embedding]));
        }
        for l in 0..self.layers {
            let input = if l == 0 { self.input_dim() } else { h };
            specs.push(spec(&format!("gru.{l}.w_in"), &[3 * h, input]));
            specs.push(spec(&format!("gru.{l}.w_rec"), &[3 * h, h]));
            specs.push(spec(&format!("gru.{l}.bias"), &[3 * h]));
        }
        specs.push(spec("head.mu.weight", &[1, h]));
        specs.push(spec("head.mu.bias", &[1]));
        specs.push(spec("head.sigma.weight", &[1, h]));
        specs.push(spec("head.sigma.bias", &[1]));
        specs.push(spec("head.mix.hidden.weight", &[self.weight_hidden, h]));
        specs.push(spec("head.mix.hidden.bias", &[self.weight_hidden]));
        specs.push(spec("head.mix.out.weight", &[self.components, self.weight_hidden]));
        specs.push(spec("head.mix.out.bias", &[self.components]));
        Layout::new(specs)
    }
}

fn spec(name: &str, shape: &[usize]) -> ParamSpec {
    ParamSpec { name: name.to_string(), shape: shape.to_vec() }
}

/// One step of network input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInput {
    /// Previous target value in standardized units.
    pub lag_value: f64,
    pub hour: Option<u8>,
    pub dow: Option<u8>,
    pub series_id: usize,
}

/// Per-layer recurrent state.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    layers: Vec<Vec<f64>>,
}

impl HiddenState {
    pub fn zeros(config: &NetConfig) -> Self {
        Self { layers: vec![vec![0.0; config.hidden]; config.layers] }
    }

    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }

    pub fn top(&self) -> &[f64] {
        self.layers.last().expect("at least one layer")
    }
}

/// Distribution parameters emitted at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStepParams {
    pub mu: f64,
    pub sigma: f64,
    pub weights: MixWeights<f64>,
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub fn softmax(v: &[f64]) -> MixWeights<f64> {
    assert!(!v.is_empty(), "softmax of an empty vector");
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    MixWeights::new(e.into_iter().map(|x| x / s).collect()).expect("softmax output lies on the simplex")
}

/// Cached flat ranges of every tensor.
#[derive(Debug, Clone)]
pub(crate) struct NetIndex {
    pub series: std::ops::Range<usize>,
    pub hour: Option<std::ops::Range<usize>>,
    pub dow: Option<std::ops::Range<usize>>,
    pub gru: Vec<GruIndex>,
    pub mu_w: std::ops::Range<usize>,
    pub mu_b: usize,
    pub sig_w: std::ops::Range<usize>,
    pub sig_b: usize,
    pub mix_w1: std::ops::Range<usize>,
    pub mix_b1: std::ops::Range<usize>,
    pub mix_w2: std::ops::Range<usize>,
    pub mix_b2: std::ops::Range<usize>,
}

#[derive(Debug, Clone)]
pub(crate) struct GruIndex {
    pub input: usize,
    pub w_in: std::ops::Range<usize>,
    pub w_rec: std::ops::Range<usize>,
    pub bias: std::ops::Range<usize>,
}

impl NetIndex {
    fn new(config: &NetConfig, layout: &Layout) -> Self {
        let r = |n: &str| layout.range_of(n).expect("tensor present in layout");
        let gru = (0..config.layers)
            .map(|l| GruIndex {
                input: if l == 0 { config.input_dim() } else { config.hidden },
                w_in: r(&format!("gru.{l}.w_in")),
                w_rec: r(&format!("gru.{l}.w_rec")),
                bias: r(&format!("gru.{l}.bias")),
            })
            .collect();
        Self {
            series: r("embed.series"),
            hour: layout.range_of("embed.hour"),
            dow: layout.range_of("embed.dow"),
            gru,
            mu_w: r("head.mu.weight"),
            mu_b: r("head.mu.bias").start,
            sig_w: r("head.sigma.weight"),
            sig_b: r("head.sigma.bias").start,
            mix_w1: r("head.mix.hidden.weight"),
            mix_b1: r("head.mix.hidden.bias"),
            mix_w2: r("head.mix.out.weight"),
            mix_b2: r("head.mix.out.bias"),
        }
    }
}

/// Intermediates of one recurrent cell evaluation.
#[derive(Debug, Clone)]
pub(crate) struct LayerRecord {
    pub input: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub update: Vec<f64>,
    pub reset: Vec<f64>,
    pub cand: Vec<f64>,
    /// Recurrent contribution to the candidate pre-activation, before the reset gate.
    pub rec_cand: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct HeadRecord {
    pub h: Vec<f64>,
    pub sigma_pre: f64,
    pub mix_pre: Vec<f64>,
    pub mix_hidden: Vec<f64>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct StepRecord {
    pub input: StepInput,
    pub layers: Vec<LayerRecord>,
    pub head: Option<HeadRecord>,
    pub output: Option<GaussianStepParams>,
}

/// Forward intermediates retained for reverse-mode differentiation.
#[derive(Debug, Clone)]
pub struct Trace {
    pub(crate) steps: Vec<StepRecord>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Head output at step `s`, when the head was evaluated there.
    pub fn output(&self, s: usize) -> Option<&GaussianStepParams> {
        self.steps.get(s).and_then(|r| r.output.as_ref())
    }

    pub fn last_output(&self) -> Option<&GaussianStepParams> {
        self.steps.last().and_then(|r| r.output.as_ref())
    }
}

/// Which steps of an unrolled window evaluate the distribution heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Heads {
    All,
    Last,
}

/// Recurrent forecaster with its parameters.
#[derive(Debug, Clone)]
pub struct Network {
    config: NetConfig,
    params: ParamSet,
    index: NetIndex,
}

impl Network {
    /// Uniform `±1/√fan_in` initialization for matrices, zero biases.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Arc::new(config.layout());
        let mut params = ParamSet::zeros(layout.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, s) in layout.specs().iter().enumerate() {
            if s.shape.len() < 2 {
                continue;
            }
            let bound = 1.0 / (s.shape[1] as f64).sqrt();
            for v in &mut params.as_mut_slice()[layout.range(i)] {
                *v = rng.random_range(-bound..bound);
            }
        }
        let index = NetIndex::new(&config, &layout);
        Ok(Self { config, params, index })
    }

    pub fn from_params(config: NetConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if **params.layout() != layout {
            let expected: Vec<String> = layout.specs().iter().map(|s| format!("{}{:?}", s.name, s.shape)).collect();
            let got: Vec<String> = params.layout().specs().iter().map(|s| format!("{}{:?}", s.name, s.shape)).collect();
            let first = expected
                .iter()
                .zip(&got)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("expected {a}, found {b}"))
                .unwrap_or_else(|| format!("expected {} tensors, found {}", expected.len(), got.len()));
            return Err(Error::ShapeMismatch(first));
        }
        let index = NetIndex::new(&config, params.layout());
        Ok(Self { config, params, index })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub(crate) fn index(&self) -> &NetIndex {
        &self.index
    }

    /// Replaces the weight head's output with fixed weights (or restores it with `None`).
    pub fn pin_weights(&mut self, weights: Option<MixWeights<f64>>) -> Result<()> {
        if let Some(w) = &weights {
            if w.len() != self.config.components {
                return Err(Error::WeightDimensionMismatch { expected: self.config.components, got: w.len() });
            }
        }
        self.config.pinned_weights = weights.map(MixWeights::into_inner);
        Ok(())
    }

    pub fn zero_state(&self) -> HiddenState {
        HiddenState::zeros(&self.config)
    }

    fn check_state(&self, state: &HiddenState) -> Result<()> {
        if state.layers.len() != self.config.layers || state.layers.iter().any(|h| h.len() != self.config.hidden) {
            return Err(Error::ShapeMismatch(format!(
                "hidden state has {} layers, network expects {}x{}",
                state.layers.len(),
                self.config.layers,
                self.config.hidden
            )));
        }
        Ok(())
    }

    fn embed(&self, input: &StepInput) -> Result<Vec<f64>> {
        let p = self.params.as_slice();
        let c = &self.config;
        if input.series_id >= c.n_series {
            return Err(Error::ShapeMismatch(format!(
                "series id {} outside embedding table of {} rows",
                input.series_id, c.n_series
            )));
        }
        let mut x = Vec::with_capacity(c.input_dim());
        let e = c.series_embedding;
        let base = self.index.series.start + input.series_id * e;
        x.extend_from_slice(&p[base..base + e]);
        if let Some(range) = &self.index.hour {
            let code = input.hour.ok_or_else(|| Error::ShapeMismatch("hour-of-day code missing".into()))? as usize;
            if code >= HOURS_PER_DAY {
                return Err(Error::ShapeMismatch(format!("hour code {code} out of range")));
            }
            let base = range.start + code * c.hour_embedding;
            x.extend_from_slice(&p[base..base + c.hour_embedding]);
        }
        if let Some(range) = &self.index.dow {
            let code = input.dow.ok_or_else(|| Error::ShapeMismatch("day-of-week code missing".into()))? as usize;
            if code >= DAYS_PER_WEEK {
                return Err(Error::ShapeMismatch(format!("day-of-week code {code} out of range")));
            }
            let base = range.start + code * c.dow_embedding;
            x.extend_from_slice(&p[base..base + c.dow_embedding]);
        }
        x.push(input.lag_value);
        Ok(x)
    }

    /// One gated recurrent cell; returns the new hidden vector.
    fn cell(&self, layer: usize, x: &[f64], h_prev: &[f64], record: Option<&mut Vec<LayerRecord>>) -> Vec<f64> {
        let p = self.params.as_slice();
        let g = &self.index.gru[layer];
        let h = self.config.hidden;
        let w_in = &p[g.w_in.clone()];
        let w_rec = &p[g.w_rec.clone()];
        let bias = &p[g.bias.clone()];
        let mut a = bias.to_vec();
        matvec_acc(w_in, x, &mut a);
        let mut rec = vec![0.0; 3 * h];
        matvec_acc(w_rec, h_prev, &mut rec);
        let mut update = vec![0.0; h];
        let mut reset = vec![0.0; h];
        let mut cand = vec![0.0; h];
        let mut out = vec![0.0; h];
        for i in 0..h {
            update[i] = sigmoid(a[i] + rec[i]);
            reset[i] = sigmoid(a[h + i] + rec[h + i]);
            cand[i] = (a[2 * h + i] + reset[i] * rec[2 * h + i]).tanh();
            out[i] = (1.0 - update[i]) * cand[i] + update[i] * h_prev[i];
        }
        if let Some(records) = record {
            records.push(LayerRecord {
                input: x.to_vec(),
                h_prev: h_prev.to_vec(),
                update,
                reset,
                cand,
                rec_cand: rec[2 * h..].to_vec(),
            });
        }
        out
    }

    fn heads(&self, h: &[f64]) -> (GaussianStepParams, HeadRecord) {
        let p = self.params.as_slice();
        let ix = &self.index;
        let mu = dot(&p[ix.mu_w.clone()], h) + p[ix.mu_b];
        let sigma_pre = dot(&p[ix.sig_w.clone()], h) + p[ix.sig_b];
        let sigma = softplus(sigma_pre);
        let (weights, mix_pre, mix_hidden) = match &self.config.pinned_weights {
            Some(w) => (MixWeights::new(w.clone()).expect("validated at pin time"), Vec::new(), Vec::new()),
            None => {
                let mut pre = p[ix.mix_b1.clone()].to_vec();
                matvec_acc(&p[ix.mix_w1.clone()], h, &mut pre);
                let hidden: Vec<f64> = pre.iter().map(|&v| elu(v)).collect();
                let mut logits = p[ix.mix_b2.clone()].to_vec();
                matvec_acc(&p[ix.mix_w2.clone()], &hidden, &mut logits);
                (softmax(&logits), pre, hidden)
            }
        };
        let record = HeadRecord {
            h: h.to_vec(),
            sigma_pre,
            mix_pre,
            mix_hidden,
            weights: weights.as_slice().to_vec(),
        };
        (GaussianStepParams { mu, sigma, weights }, record)
    }

    fn advance(&self, state: &HiddenState, input: &StepInput, mut record: Option<&mut Vec<LayerRecord>>) -> Result<HiddenState> {
        let mut x = self.embed(input)?;
        let mut layers = Vec::with_capacity(self.config.layers);
        for (l, h_prev) in state.layers.iter().enumerate() {
            let h = self.cell(l, &x, h_prev, record.as_deref_mut());
            x = h.clone();
            layers.push(h);
        }
        Ok(HiddenState { layers })
    }

    /// Advances the state by one step and evaluates the heads on the new state.
    pub fn forward_step(&self, state: &HiddenState, input: &StepInput) -> Result<(HiddenState, GaussianStepParams)> {
        self.check_state(state)?;
        let next = self.advance(state, input, None)?;
        let (out, _) = self.heads(next.top());
        Ok((next, out))
    }

    /// Advances the state without evaluating the heads.
    pub fn advance_state(&self, state: &HiddenState, input: &StepInput) -> Result<HiddenState> {
        self.check_state(state)?;
        self.advance(state, input, None)
    }

    /// Teacher-forced unroll over a window, one output per step.
    pub fn unroll_window(&self, inputs: &[StepInput], init: Option<&HiddenState>) -> Result<(Vec<GaussianStepParams>, Trace)> {
        let trace = self.unroll_traced(inputs, init, Heads::All)?;
        let outputs = trace.steps.iter().map(|s| s.output.clone().expect("heads evaluated at every step")).collect();
        Ok((outputs, trace))
    }

    /// Teacher-forced unroll recording everything needed for backpropagation.
    pub fn unroll_traced(&self, inputs: &[StepInput], init: Option<&HiddenState>, heads: Heads) -> Result<Trace> {
        if inputs.is_empty() {
            return Err(Error::EmptyWindow);
        }
        let mut state = match init {
            Some(s) => {
                self.check_state(s)?;
                s.clone()
            }
            None => self.zero_state(),
        };
        let mut steps = Vec::with_capacity(inputs.len());
        for (s, input) in inputs.iter().enumerate() {
            let mut layers = Vec::with_capacity(self.config.layers);
            state = self.advance(&state, input, Some(&mut layers))?;
            let (head, output) = if heads == Heads::All || s + 1 == inputs.len() {
                let (out, rec) = self.heads(state.top());
                (Some(rec), Some(out))
            } else {
                (None, None)
            };
            steps.push(StepRecord { input: *input, layers, head, output });
        }
        Ok(Trace { steps })
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out += W·x` for row-major `W` of shape `[out.len(), x.len()]`.
#[inline]
pub(crate) fn matvec_acc(w: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(n)) {
        *o += dot(row, x);
    }
}
