//! Boundary-aware denoising diffusion model for counterfactual outcomes.
//!
//! The forward process is the usual closed form
//! `x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε`. The boundary-aware encoding `Ψ(D, Ŝ)` does
//! not shift the noising mean; it enters the denoiser as a conditioning
//! feature alongside `D`, the covariates and the spillover state.
//!
//! The denoiser is a small SiLU MLP with hand-written backpropagation,
//! trained with Adam on the SNR-weighted noise-prediction loss. Sampling is
//! ancestral with `Σ = β_t`, optionally on an evenly respaced subsequence of
//! the training steps.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cusum::{CusumConfig, CusumState, GaussianModel};
use crate::error::{Error, Result};
use crate::rng::{derive_named, derive_seed, seeded, stream_rng};
use crate::spatial_dgp::SpatialPanel;

pub const SNR_CLIP: (f64, f64) = (0.05, 20.0);
const FORMAT_VERSION: u32 = 1;
/// Smallest residual variance the skip term is allowed to assume.
const DATA_VAR_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub n_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(skip)]
    beta: Vec<f64>,
    #[serde(skip)]
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced `β_t` from `beta_start` to `beta_end`.
    pub fn linear(n_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::invalid("diffusion needs at least one step"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid("betas must satisfy 0 < start ≤ end < 1"));
        }
        let mut s = Self {
            n_steps,
            beta_start,
            beta_end,
            beta: Vec::new(),
            alpha_bar: Vec::new(),
        };
        s.rebuild();
        Ok(s)
    }

    pub fn default_for(n_steps: usize) -> Result<Self> {
        Self::linear(n_steps, 1e-4, 0.02)
    }

    fn rebuild(&mut self) {
        let n = self.n_steps;
        self.beta = (0..n)
            .map(|i| {
                if n == 1 {
                    self.beta_start
                } else {
                    self.beta_start + (self.beta_end - self.beta_start) * i as f64 / (n - 1) as f64
                }
            })
            .collect();
        let mut prod = 1.0;
        self.alpha_bar = self
            .beta
            .iter()
            .map(|b| {
                prod *= 1.0 - b;
                prod
            })
            .collect();
    }

    /// `β_t` for `1 ≤ t ≤ T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// `ᾱ_t` for `1 ≤ t ≤ T`; `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 { 1.0 } else { self.alpha_bar[t - 1] }
    }

    pub fn snr_weight(&self, t: usize) -> f64 {
        let a = self.alpha_bar(t);
        (a / (1.0 - a)).clamp(SNR_CLIP.0, SNR_CLIP.1)
    }

    /// Evenly spaced timesteps `1 = t_1 < … < t_S = T`.
    pub fn respaced(&self, steps: usize) -> Vec<usize> {
        let s = steps.clamp(1, self.n_steps);
        if s == self.n_steps {
            return (1..=self.n_steps).collect();
        }
        if s == 1 {
            return vec![self.n_steps];
        }
        let mut v: Vec<usize> = (0..s)
            .map(|i| 1 + ((self.n_steps - 1) as f64 * i as f64 / (s - 1) as f64).round() as usize)
            .collect();
        v.dedup();
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreatmentEncodingParams {
    pub gamma_pe: f64,
    pub gamma_ge: f64,
    pub phi: f64,
    /// `+∞` (serialised as `null`) when no boundary was detected.
    #[serde(with = "unbounded")]
    pub s_star: f64,
}

/// `f64` that maps `+∞` to JSON `null` and back.
pub(crate) mod unbounded {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() { s.serialize_some(v) } else { s.serialize_none() }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

impl Default for TreatmentEncodingParams {
    fn default() -> Self {
        Self {
            gamma_pe: 1.0,
            gamma_ge: 2.0,
            phi: 0.5,
            s_star: f64::INFINITY,
        }
    }
}

/// `γ_PE·d` below the boundary, `γ_GE·d + φ·(s − s*)` at or above it.
pub fn psi(d: f64, s: f64, p: &TreatmentEncodingParams) -> f64 {
    if s < p.s_star {
        p.gamma_pe * d
    } else {
        p.gamma_ge * d + p.phi * (s - p.s_star)
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Fully connected network with SiLU hidden layers and a linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    /// Layer widths from input to output.
    pub dims: Vec<usize>,
    /// Per layer: weights (row-major, out × in) followed by biases.
    pub params: Vec<f64>,
}

/// Scratch buffers for one forward/backward pass.
#[derive(Debug, Clone)]
pub struct Workspace {
    pre: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn new(dims: Vec<usize>, seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("network needs at least an input and an output layer"));
        }
        let mut rng = seeded(seed);
        let mut params = Vec::with_capacity(Self::count(&dims));
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push(rng.random_range(-bound..bound));
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self { dims, params })
    }

    fn count(dims: &[usize]) -> usize {
        dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn workspace(&self) -> Workspace {
        Workspace {
            pre: self.dims.iter().map(|&d| vec![0.0; d]).collect(),
            act: self.dims.iter().map(|&d| vec![0.0; d]).collect(),
            delta: self.dims.iter().map(|&d| vec![0.0; d]).collect(),
        }
    }

    /// Scalar output for `input`; activations stay in `ws` for backprop.
    pub fn forward(&self, input: &[f64], ws: &mut Workspace) -> f64 {
        let layers = self.dims.len() - 1;
        ws.act[0].copy_from_slice(input);
        let mut offset = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let w = &self.params[offset..offset + n_in * n_out];
            let b = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;
            let (head, tail) = ws.act.split_at_mut(l + 1);
            let a_in = &head[l];
            let a_out = &mut tail[0];
            let z_out = &mut ws.pre[l + 1];
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                let mut acc = b[o];
                for (wi, ai) in row.iter().zip(a_in.iter()) {
                    acc += wi * ai;
                }
                z_out[o] = acc;
                a_out[o] = if l + 1 == layers { acc } else { acc * sigmoid(acc) };
            }
        }
        ws.act[layers][0]
    }

    /// Accumulate `g_out · ∂output/∂params` into `grad` after a forward pass.
    pub fn backward(&self, g_out: f64, ws: &mut Workspace, grad: &mut [f64]) {
        let layers = self.dims.len() - 1;
        let mut offsets = Vec::with_capacity(layers);
        let mut offset = 0;
        for l in 0..layers {
            offsets.push(offset);
            offset += self.dims[l] * self.dims[l + 1] + self.dims[l + 1];
        }
        ws.delta[layers][0] = g_out;
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let off = offsets[l];
            {
                let delta = &ws.delta[l + 1];
                let a_in = &ws.act[l];
                let (gw, gb) = grad[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                for o in 0..n_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    let row = &mut gw[o * n_in..(o + 1) * n_in];
                    for (g, a) in row.iter_mut().zip(a_in.iter()) {
                        *g += d * a;
                    }
                    gb[o] += d;
                }
            }
            if l == 0 {
                break;
            }
            let w = &self.params[off..off + n_in * n_out];
            let (lower, upper) = ws.delta.split_at_mut(l + 1);
            let delta_out = &upper[0];
            let delta_in = &mut lower[l];
            delta_in.iter_mut().for_each(|v| *v = 0.0);
            for o in 0..n_out {
                let d = delta_out[o];
                let row = &w[o * n_in..(o + 1) * n_in];
                for (di, wi) in delta_in.iter_mut().zip(row.iter()) {
                    *di += d * wi;
                }
            }
            for (di, &z) in delta_in.iter_mut().zip(ws.pre[l].iter()) {
                let s = sigmoid(z);
                *di *= s * (1.0 + z * (1.0 - s));
            }
        }
    }
}

/// Conditioning for one observation in raw (unscaled) units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conditioning {
    pub d: f64,
    pub z: Vec<f64>,
    pub s_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRow {
    pub x0: f64,
    pub cond: Conditioning,
}

/// Affine maps between raw units and the model's working units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub y_shift: f64,
    pub y_scale: f64,
    pub s_shift: f64,
    pub s_scale: f64,
    pub z_shift: Vec<f64>,
    pub z_scale: Vec<f64>,
    /// Residual variance of the standardised outcomes around the mean head.
    pub data_var: f64,
}

impl Scaling {
    pub fn identity(k: usize) -> Self {
        Self {
            y_shift: 0.0,
            y_scale: 1.0,
            s_shift: 0.0,
            s_scale: 1.0,
            z_shift: vec![0.0; k],
            z_scale: vec![1.0; k],
            data_var: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Mean weighted loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// `(epoch, batch)` where the residual monitor alarmed.
    pub crossings: Vec<(usize, usize)>,
}

impl TrainingLog {
    /// Least-squares slope of the epoch losses; negative when training improves.
    pub fn loss_trend(&self) -> Option<f64> {
        let n = self.epoch_loss.len();
        if n < 2 {
            return None;
        }
        let mx = (n - 1) as f64 / 2.0;
        let my = self.epoch_loss.iter().sum::<f64>() / n as f64;
        let (mut sxy, mut sxx) = (0.0, 0.0);
        for (i, y) in self.epoch_loss.iter().enumerate() {
            sxy += (i as f64 - mx) * (y - my);
            sxx += (i as f64 - mx).powi(2);
        }
        Some(sxy / sxx)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr` under cosine decay.
    pub lr_floor: f64,
    pub n_steps: usize,
    pub hidden: Vec<usize>,
    pub seed: u64,
    /// Respaced sampling length; `None` samples with every training step.
    pub sample_steps: Option<usize>,
    pub encoding: TreatmentEncodingParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            lr: 1e-3,
            lr_floor: 0.05,
            n_steps: 1000,
            hidden: vec![16, 16],
            seed: 0,
            sample_steps: Some(5),
            encoding: TreatmentEncodingParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lr_floor) {
            return Err(Error::invalid("lr_floor must lie in [0, 1]"));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdpmModel {
    pub format_version: u32,
    pub denoiser: Mlp,
    pub schedule: NoiseSchedule,
    pub encoding: TreatmentEncodingParams,
    pub scaling: Scaling,
    pub n_covariates: usize,
    /// Linear conditional-mean head on `[1, D, Z, Ŝ, Ψ]` in working units.
    pub mean_head: Vec<f64>,
    pub sample_steps: Option<usize>,
    pub trained: bool,
    pub training_log: TrainingLog,
}

/// Input width: x_t, three time features, d, covariates, ŝ, Ψ.
fn input_width(k: usize) -> usize {
    4 + 1 + k + 2
}

/// Offset of the conditioning block inside the denoiser input.
const COND_OFFSET: usize = 4;

fn head_width(k: usize) -> usize {
    1 + input_width(k) - COND_OFFSET
}

impl DdpmModel {
    pub fn new(n_covariates: usize, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut dims = vec![input_width(n_covariates)];
        dims.extend(&config.hidden);
        dims.push(1);
        let mut denoiser = Mlp::new(dims, derive_named(config.seed, "init"))?;
        // the residual network starts at zero so the untrained model is the
        // Gaussian-optimal denoiser around the mean head
        let last = config.hidden.last().copied().unwrap_or(input_width(n_covariates));
        let n = denoiser.params.len();
        denoiser.params[n - last - 1..].iter_mut().for_each(|w| *w = 0.0);
        Ok(Self {
            format_version: FORMAT_VERSION,
            denoiser,
            schedule: NoiseSchedule::default_for(config.n_steps)?,
            encoding: config.encoding,
            scaling: Scaling::identity(n_covariates),
            n_covariates,
            mean_head: vec![0.0; head_width(n_covariates)],
            sample_steps: config.sample_steps,
            trained: false,
            training_log: TrainingLog::default(),
        })
    }

    /// Write the denoiser input for `(x_t, t, cond)` into `buf`.
    pub fn features(&self, x_t: f64, t: usize, cond: &Conditioning, buf: &mut [f64]) {
        let frac = t as f64 / self.schedule.n_steps as f64;
        let angle = 2.0 * std::f64::consts::PI * frac;
        buf[0] = x_t;
        buf[1] = frac;
        buf[2] = angle.sin();
        buf[3] = angle.cos();
        buf[4] = cond.d;
        let k = self.n_covariates;
        for c in 0..k {
            buf[5 + c] = (cond.z[c] - self.scaling.z_shift[c]) / self.scaling.z_scale[c];
        }
        buf[5 + k] = (cond.s_hat - self.scaling.s_shift) / self.scaling.s_scale;
        buf[6 + k] = psi(cond.d, cond.s_hat, &self.encoding);
    }

    pub fn input_width(&self) -> usize {
        input_width(self.n_covariates)
    }

    /// `ε̂ = c(t)·(x_t − √ᾱ_t·m) + f(x_t, t, cond)`.
    ///
    /// The first term is the optimal noise prediction for Gaussian data with
    /// conditional mean `m` (the linear head) and variance `data_var`; the
    /// network `f` learns the departure from it.
    pub fn predict_noise(&self, x_t: f64, t: usize, cond: &Conditioning, ws: &mut Workspace, buf: &mut [f64]) -> f64 {
        self.features(x_t, t, cond, buf);
        let m = self.head_mean(buf);
        self.skip_coefficient(t) * (x_t - self.schedule.alpha_bar(t).sqrt() * m) + self.denoiser.forward(buf, ws)
    }

    fn head_mean(&self, buf: &[f64]) -> f64 {
        self.mean_head[0]
            + self.mean_head[1..].iter().zip(&buf[COND_OFFSET..]).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Parameters trained by gradient descent: network weights, then the head.
    pub fn n_trainable(&self) -> usize {
        self.denoiser.n_params() + self.mean_head.len()
    }

    /// Accumulate `g · ∂ε̂/∂θ` into `grad` after [`Self::predict_noise`]
    /// at timestep `t` with the same `ws` and `buf`.
    pub fn backward(&self, g: f64, t: usize, ws: &mut Workspace, buf: &[f64], grad: &mut [f64]) {
        let (g_net, g_head) = grad.split_at_mut(self.denoiser.n_params());
        self.denoiser.backward(g, ws, g_net);
        let c = -g * self.skip_coefficient(t) * self.schedule.alpha_bar(t).sqrt();
        g_head[0] += c;
        for (gh, f) in g_head[1..].iter_mut().zip(&buf[COND_OFFSET..]) {
            *gh += c * f;
        }
    }

    pub fn skip_coefficient(&self, t: usize) -> f64 {
        let a = self.schedule.alpha_bar(t);
        (1.0 - a).sqrt() / (a * self.scaling.data_var + 1.0 - a)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut m: DdpmModel = serde_json::from_str(text)?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Parse(format!("unsupported model format version {}", m.format_version)));
        }
        m.schedule.rebuild();
        let expected = Mlp::count(&m.denoiser.dims);
        if m.denoiser.params.len() != expected
            || m.denoiser.dims.first() != Some(&input_width(m.n_covariates))
            || m.mean_head.len() != head_width(m.n_covariates)
        {
            return Err(Error::Parse("model layer shapes do not match the parameter dump".into()));
        }
        Ok(m)
    }
}

/// `x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε`; returns `(x_t, ε)`.
pub fn forward_sample(x0: f64, t: usize, schedule: &NoiseSchedule, noise: f64) -> Result<(f64, f64)> {
    if t == 0 || t > schedule.n_steps {
        return Err(Error::invalid(format!("timestep {t} outside 1..={}", schedule.n_steps)));
    }
    let a = schedule.alpha_bar(t);
    Ok((a.sqrt() * x0 + (1.0 - a).sqrt() * noise, noise))
}

/// One noised training example.
#[derive(Debug, Clone)]
pub struct NoisedExample<'a> {
    pub row: &'a TrainingRow,
    pub t: usize,
    pub noise: f64,
}

/// Mean SNR-weighted loss over `batch` and, optionally, its gradient with
/// respect to the trainable parameters (accumulated into `grad`, laid out
/// as in [`DdpmModel::n_trainable`]).
pub fn denoising_loss(model: &DdpmModel, batch: &[NoisedExample<'_>], grad: Option<&mut [f64]>) -> f64 {
    let mut ws = model.denoiser.workspace();
    let mut buf = vec![0.0; model.input_width()];
    let scale = 1.0 / batch.len().max(1) as f64;
    let mut total = 0.0;
    let mut grad = grad;
    for ex in batch {
        let a = model.schedule.alpha_bar(ex.t);
        let x0 = (ex.row.x0 - model.scaling.y_shift) / model.scaling.y_scale;
        let x_t = a.sqrt() * x0 + (1.0 - a).sqrt() * ex.noise;
        let eps_hat = model.predict_noise(x_t, ex.t, &ex.row.cond, &mut ws, &mut buf);
        let w = model.schedule.snr_weight(ex.t);
        let r = ex.noise - eps_hat;
        total += w * r * r * scale;
        if let Some(g) = grad.as_deref_mut() {
            model.backward(-2.0 * w * r * scale, ex.t, &mut ws, &buf, g);
        }
    }
    total
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    fn apply(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.step += 1;
        let c1 = 1.0 - B1.powi(self.step);
        let c2 = 1.0 - B2.powi(self.step);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

/// Continue training `model` on `rows` for `config.epochs` epochs.
///
/// Each example draws a fresh timestep and noise every epoch. A CUSUM on the
/// per-batch mean residual `ε − ε̂` (in-control model `N(0, 1/√B)`) records
/// alarms in the training log and restarts after each one.
pub fn train_on(model: &mut DdpmModel, rows: &[TrainingRow], config: &TrainConfig) -> Result<()> {
    config.validate()?;
    if rows.is_empty() {
        return Err(Error::InsufficientData("no training rows".into()));
    }
    if rows.iter().any(|r| r.cond.z.len() != model.n_covariates) {
        return Err(Error::invalid("covariate width does not match the model"));
    }
    if rows.iter().any(|r| !r.x0.is_finite()) {
        return Err(Error::invalid("training outcomes must be finite"));
    }
    fit_outcome_scaling(&mut model.scaling, rows);
    let x0: Vec<f64> = rows
        .iter()
        .map(|r| (r.x0 - model.scaling.y_shift) / model.scaling.y_scale)
        .collect();
    fit_mean_head(model, rows, &x0);
    if model.scaling.data_var <= DATA_VAR_FLOOR {
        // the head reproduces every outcome, so the skip term alone is the
        // exact denoiser and optimiser steps would only add jitter
        model.trained = config.epochs > 0;
        return Ok(());
    }
    let n_net = model.denoiser.n_params();
    let n_params = model.n_trainable();
    let mut params: Vec<f64> = model.denoiser.params.iter().chain(&model.mean_head).copied().collect();
    let mut adam = Adam::new(n_params);
    let mut grad = vec![0.0; n_params];
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut rng = seeded(derive_named(config.seed, "train"));
    let mut ws = model.denoiser.workspace();
    let mut buf = vec![0.0; model.input_width()];
    let bsz = config.batch_size.min(rows.len());
    let sd = 1.0 / (bsz as f64).sqrt();
    let monitor = CusumConfig::with_default_allowance(
        crate::cusum::DEFAULT_THRESHOLD,
        GaussianModel { mean: 0.0, sd },
        GaussianModel { mean: sd, sd },
    )?;
    let mut cusum = CusumState::default();
    let mut last_finite = None;
    let t_max = model.schedule.n_steps;
    let total_steps = (config.epochs * rows.len().div_ceil(bsz)).max(1);
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for (b, chunk) in order.chunks(bsz).enumerate() {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / chunk.len() as f64;
            let mut loss = 0.0;
            let mut resid = 0.0;
            for &i in chunk {
                let row = &rows[i];
                let t = rng.random_range(1..=t_max);
                let noise: f64 = StandardNormal.sample(&mut rng);
                let a = model.schedule.alpha_bar(t);
                let x_t = a.sqrt() * x0[i] + (1.0 - a).sqrt() * noise;
                let eps_hat = model.predict_noise(x_t, t, &row.cond, &mut ws, &mut buf);
                let w = model.schedule.snr_weight(t);
                let r = noise - eps_hat;
                loss += w * r * r * scale;
                resid += r * scale;
                model.backward(-2.0 * w * r * scale, t, &mut ws, &buf, &mut grad);
            }
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingFailure {
                    epoch,
                    batch: b,
                    last_finite_loss: last_finite,
                });
            }
            last_finite = Some(loss);
            epoch_total += loss * chunk.len() as f64;
            let progress = step as f64 / total_steps as f64;
            let lr = config.lr * (config.lr_floor + (1.0 - config.lr_floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
            adam.apply(&mut params, &grad, lr);
            step += 1;
            model.denoiser.params.copy_from_slice(&params[..n_net]);
            model.mean_head.copy_from_slice(&params[n_net..]);
            cusum = crate::cusum::update(cusum, resid, &monitor);
            if cusum.crossed_at.is_some() {
                model.training_log.crossings.push((epoch, b));
                cusum = CusumState::default();
            }
        }
        model.training_log.epoch_loss.push(epoch_total / rows.len() as f64);
    }
    if config.epochs > 0 {
        model.trained = true;
    }
    Ok(())
}

/// Ridge-stabilised least squares of the working outcomes on the head
/// features; the residual variance becomes the skip term's `data_var`.
fn fit_mean_head(model: &mut DdpmModel, rows: &[TrainingRow], x0: &[f64]) {
    use nalgebra::{DMatrix, DVector};
    let p = model.mean_head.len();
    let mut buf = vec![0.0; model.input_width()];
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    let mut feats = Vec::with_capacity(rows.len());
    for (row, &y) in rows.iter().zip(x0) {
        model.features(0.0, 0, &row.cond, &mut buf);
        let f = DVector::from_iterator(p, std::iter::once(1.0).chain(buf[COND_OFFSET..].iter().copied()));
        xtx += &f * f.transpose();
        xty += &f * y;
        feats.push(f);
    }
    let ridge = 1e-8 * rows.len() as f64;
    for i in 0..p {
        xtx[(i, i)] += ridge;
    }
    let Some(chol) = xtx.cholesky() else { return };
    let theta = chol.solve(&xty);
    let rss: f64 = feats.iter().zip(x0).map(|(f, y)| (y - f.dot(&theta)).powi(2)).sum();
    model.mean_head = theta.iter().copied().collect();
    model.scaling.data_var = (rss / rows.len() as f64).max(DATA_VAR_FLOOR);
}

/// Outcome shift and scale from the raw training rows.
fn fit_outcome_scaling(scaling: &mut Scaling, rows: &[TrainingRow]) {
    let n = rows.len() as f64;
    let mean = rows.iter().map(|r| r.x0).sum::<f64>() / n;
    let sd = (rows.iter().map(|r| (r.x0 - mean).powi(2)).sum::<f64>() / n).sqrt();
    let degenerate = !(sd > 1e-12 * mean.abs().max(1.0));
    scaling.y_shift = mean;
    scaling.y_scale = if degenerate { 1.0 } else { sd };
    scaling.data_var = if degenerate { DATA_VAR_FLOOR } else { 1.0 };
}

/// Per-period spillover state used for conditioning.
///
/// The simulated state `S_t` when the panel carries it; otherwise the period
/// index, which assumes the state trends upward over the sample.
pub fn spillover_estimate(panel: &SpatialPanel) -> Vec<f64> {
    match &panel.period_state {
        Some(s) => s.clone(),
        None => (0..panel.t).map(|t| t as f64).collect(),
    }
}

/// Outcomes with period means and a pooled covariate fit removed.
///
/// The covariate slope is estimated within periods without the treatment,
/// which is unbiased when treatment is independent of the covariates; the
/// treatment contrast is left intact.
pub fn residualised_outcomes(panel: &SpatialPanel) -> Result<nalgebra::DMatrix<f64>> {
    use nalgebra::{DMatrix, DVector};
    let (n, t, k) = (panel.n, panel.t, panel.k());
    let demean = |m: &DMatrix<f64>| {
        let mut out = m.clone();
        for s in 0..t {
            let avg = m.column(s).mean();
            for i in 0..n {
                out[(i, s)] -= avg;
            }
        }
        out
    };
    let y = demean(&panel.outcomes);
    if k == 0 {
        return Ok(y);
    }
    let xs: Vec<DMatrix<f64>> = panel.covariates.iter().map(demean).collect();
    let x = DMatrix::from_fn(n * t, k, |r, c| xs[c][(r / t, r % t)]);
    let yv = DVector::from_fn(n * t, |r, _| y[(r / t, r % t)]);
    let fit = crate::linalg::ols(&x, &yv)?;
    Ok(DMatrix::from_fn(n, t, |i, s| fit.residuals[i * t + s]))
}

/// Training rows (outcomes in raw units) and covariate/state scaling for `panel`.
pub fn panel_rows(panel: &SpatialPanel) -> Result<(Vec<TrainingRow>, Scaling)> {
    panel.validate()?;
    let r = residualised_outcomes(panel)?;
    let s_hat = spillover_estimate(panel);
    let k = panel.k();
    let cells = (panel.n * panel.t) as f64;
    let s_mean = s_hat.iter().sum::<f64>() / panel.t as f64;
    let s_sd = (s_hat.iter().map(|v| (v - s_mean).powi(2)).sum::<f64>() / panel.t as f64).sqrt();
    let mut z_shift = Vec::with_capacity(k);
    let mut z_scale = Vec::with_capacity(k);
    for x in &panel.covariates {
        let m = x.mean();
        let sd = (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / cells).sqrt();
        z_shift.push(m);
        z_scale.push(if sd > 0.0 { sd } else { 1.0 });
    }
    let scaling = Scaling {
        y_shift: 0.0,
        y_scale: 1.0,
        data_var: 1.0,
        s_shift: s_mean,
        s_scale: if s_sd > 0.0 { s_sd } else { 1.0 },
        z_shift,
        z_scale,
    };
    let mut rows = Vec::with_capacity(panel.n * panel.t);
    for i in 0..panel.n {
        for t in 0..panel.t {
            rows.push(TrainingRow {
                x0: r[(i, t)],
                cond: Conditioning {
                    d: panel.treatment[(i, t)],
                    z: panel.covariates.iter().map(|x| x[(i, t)]).collect(),
                    s_hat: s_hat[t],
                },
            });
        }
    }
    Ok((rows, scaling))
}

/// Fit a fresh model to `panel`.
pub fn train(panel: &SpatialPanel, config: &TrainConfig) -> Result<DdpmModel> {
    if panel.n == 0 || panel.t == 0 {
        return Err(Error::InsufficientData("empty panel".into()));
    }
    let (rows, scaling) = panel_rows(panel)?;
    let mut model = DdpmModel::new(panel.k(), config)?;
    model.scaling = scaling;
    train_on(&mut model, &rows, config)?;
    Ok(model)
}

/// Continue training `warm` on `panel` (scaling refitted, weights kept).
pub fn refit(warm: &DdpmModel, panel: &SpatialPanel, config: &TrainConfig) -> Result<DdpmModel> {
    let (rows, scaling) = panel_rows(panel)?;
    let mut model = warm.clone();
    model.scaling = scaling;
    model.encoding = config.encoding;
    model.training_log = TrainingLog::default();
    train_on(&mut model, &rows, config)?;
    Ok(model)
}

/// Reverse-process runner reused across draws.
struct Sampler<'a> {
    model: &'a DdpmModel,
    steps: Vec<usize>,
    ws: Workspace,
    buf: Vec<f64>,
}

impl<'a> Sampler<'a> {
    fn new(model: &'a DdpmModel) -> Self {
        let steps = model.schedule.respaced(model.sample_steps.unwrap_or(model.schedule.n_steps));
        Self {
            model,
            steps,
            ws: model.denoiser.workspace(),
            buf: vec![0.0; model.input_width()],
        }
    }

    /// Run several conditionings on shared noise; writes x₀ in working units.
    fn run(&mut self, conds: &[&Conditioning], rng: &mut ChaCha8Rng, out: &mut [f64]) {
        let x_start: f64 = StandardNormal.sample(rng);
        out.iter_mut().for_each(|x| *x = x_start);
        let sched = &self.model.schedule;
        for idx in (0..self.steps.len()).rev() {
            let t = self.steps[idx];
            let t_prev = if idx == 0 { 0 } else { self.steps[idx - 1] };
            let ab = sched.alpha_bar(t);
            let ab_prev = sched.alpha_bar(t_prev);
            let alpha = ab / ab_prev;
            let beta = 1.0 - alpha;
            let z: f64 = if t_prev > 0 { StandardNormal.sample(rng) } else { 0.0 };
            for (x, cond) in out.iter_mut().zip(conds) {
                let eps = self.model.predict_noise(*x, t, cond, &mut self.ws, &mut self.buf);
                let mean = (*x - beta / (1.0 - ab).sqrt() * eps) / alpha.sqrt();
                *x = mean + beta.sqrt() * z;
            }
        }
    }
}

fn ensure_trained(model: &DdpmModel) -> Result<()> {
    if !model.trained {
        return Err(Error::InvalidState("model has not been trained".into()));
    }
    Ok(())
}

/// `m_samples` outcome draws for one conditioning, in raw outcome units.
pub fn sample_counterfactual(
    model: &DdpmModel,
    d: f64,
    z: &[f64],
    s_hat: f64,
    m_samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    ensure_trained(model)?;
    if m_samples == 0 {
        return Err(Error::invalid("m_samples must be at least 1"));
    }
    if z.len() != model.n_covariates {
        return Err(Error::invalid("covariate width does not match the model"));
    }
    let cond = Conditioning { d, z: z.to_vec(), s_hat };
    Ok((0..m_samples as u64)
        .into_par_iter()
        .map(|m| {
            let mut sampler = Sampler::new(model);
            let mut rng = stream_rng(seed, m);
            let mut out = [0.0];
            sampler.run(&[&cond], &mut rng, &mut out);
            model.scaling.y_shift + model.scaling.y_scale * out[0]
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub tau_pe: Option<f64>,
    pub tau_ge: Option<f64>,
    pub tau_aggregate: f64,
    pub p_ge: f64,
    /// Location-level `τ̂_i` averaged over periods.
    pub per_unit: Vec<f64>,
    /// Per unit-period contrasts, location-major.
    pub per_cell: Vec<f64>,
    pub n_samples: usize,
    /// Set when one regime had no observations.
    pub single_regime: bool,
}

/// Counterfactual contrasts `Y(1, Ŝ) − Y(0, Ŝ)` for every unit-period.
///
/// Both arms of a draw share the same reverse-process noise. Cells with
/// `Ŝ ≥ ŝ*` are classified GE.
pub fn estimate_effects(
    model: &DdpmModel,
    panel: &SpatialPanel,
    s_star_hat: f64,
    m_samples: usize,
    seed: u64,
) -> Result<EffectEstimate> {
    ensure_trained(model)?;
    if m_samples == 0 {
        return Err(Error::invalid("m_samples must be at least 1"));
    }
    if panel.k() != model.n_covariates {
        return Err(Error::invalid("panel covariates do not match the model"));
    }
    let s_hat = spillover_estimate(panel);
    let (n, t_len) = (panel.n, panel.t);
    let per_cell: Vec<f64> = (0..n * t_len)
        .into_par_iter()
        .map(|cell| {
            let (i, t) = (cell / t_len, cell % t_len);
            let z: Vec<f64> = panel.covariates.iter().map(|x| x[(i, t)]).collect();
            let treated = Conditioning { d: 1.0, z: z.clone(), s_hat: s_hat[t] };
            let control = Conditioning { d: 0.0, z, s_hat: s_hat[t] };
            let mut sampler = Sampler::new(model);
            let mut out = [0.0; 2];
            let mut acc = 0.0;
            for m in 0..m_samples as u64 {
                let mut rng = stream_rng(derive_seed(seed, cell as u64), m);
                sampler.run(&[&treated, &control], &mut rng, &mut out);
                acc += out[0] - out[1];
            }
            model.scaling.y_scale * acc / m_samples as f64
        })
        .collect();
    let mut pe = (0.0, 0usize);
    let mut ge = (0.0, 0usize);
    for (cell, &c) in per_cell.iter().enumerate() {
        if s_hat[cell % t_len] >= s_star_hat {
            ge.0 += c;
            ge.1 += 1;
        } else {
            pe.0 += c;
            pe.1 += 1;
        }
    }
    let tau_pe = (pe.1 > 0).then(|| pe.0 / pe.1 as f64);
    let tau_ge = (ge.1 > 0).then(|| ge.0 / ge.1 as f64);
    let p_ge = ge.1 as f64 / (n * t_len) as f64;
    let tau_aggregate = match (tau_pe, tau_ge) {
        (Some(a), Some(b)) => (1.0 - p_ge) * a + p_ge * b,
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => return Err(Error::InsufficientData("panel has no cells".into())),
    };
    let per_unit = (0..n)
        .map(|i| per_cell[i * t_len..(i + 1) * t_len].iter().sum::<f64>() / t_len as f64)
        .collect();
    Ok(EffectEstimate {
        tau_pe,
        tau_ge,
        tau_aggregate,
        p_ge,
        per_unit,
        per_cell,
        n_samples: m_samples,
        single_regime: tau_pe.is_none() || tau_ge.is_none(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_is_decreasing_and_small_at_the_end() {
        let s = NoiseSchedule::default_for(1000).unwrap();
        for t in 1..1000 {
            assert!(s.alpha_bar(t + 1) < s.alpha_bar(t));
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
        }
        assert!(s.alpha_bar(1000) < 0.01);
        assert_eq!(s.respaced(1000).len(), 1000);
        let r = s.respaced(20);
        assert_eq!((r[0], *r.last().unwrap(), r.len()), (1, 1000, 20));
    }

    #[test]
    fn psi_hand_values() {
        let p = TreatmentEncodingParams { gamma_pe: 0.5, gamma_ge: 0.8, phi: 0.2, s_star: 1.0 };
        assert_eq!(psi(0.0, 0.3, &p), 0.0);
        assert_eq!(psi(1.0, 1.0, &p), 0.8);
        assert!((psi(1.0, 2.0, &p) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn forward_sample_limits() {
        let s = NoiseSchedule::default_for(100).unwrap();
        let (x, e) = forward_sample(2.0, 10, &s, 0.0).unwrap();
        assert_eq!(e, 0.0);
        assert!((x - s.alpha_bar(10).sqrt() * 2.0).abs() < 1e-15);
        assert!(forward_sample(1.0, 0, &s, 0.1).is_err());
        assert!(forward_sample(1.0, 101, &s, 0.1).is_err());
    }

    #[test]
    fn zero_epochs_leave_the_model_untouched() {
        let cfg = TrainConfig { epochs: 0, hidden: vec![4, 4], n_steps: 50, ..TrainConfig::default() };
        let mut m = DdpmModel::new(0, &cfg).unwrap();
        let init = m.clone();
        let rows = vec![TrainingRow { x0: 1.0, cond: Conditioning { d: 0.0, z: vec![], s_hat: 0.0 } }; 8];
        train_on(&mut m, &rows, &cfg).unwrap();
        assert_eq!(m.denoiser, init.denoiser);
        assert!(!m.trained);
        assert!(matches!(sample_counterfactual(&m, 1.0, &[], 0.0, 1, 0), Err(Error::InvalidState(_))));
    }

    #[test]
    fn json_round_trip() {
        let cfg = TrainConfig { hidden: vec![3], n_steps: 10, ..TrainConfig::default() };
        let m = DdpmModel::new(2, &cfg).unwrap();
        let back = DdpmModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back.denoiser, m.denoiser);
        assert_eq!(back.schedule.alpha_bar(7), m.schedule.alpha_bar(7));
    }
}
