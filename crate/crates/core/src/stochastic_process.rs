//! Jump-diffusion spillover state, first passage and crossing probabilities.
//!
//! The state follows
//!
//! ```text
//! dS = (a + b·S) dt + σ dW + h(S-, x) dN(λ(S))
//! ```
//!
//! with a state-dependent Poisson intensity `λ(S) = λ₀·(1+S)^p`. Jumps are
//! simulated by per-step Bernoulli thinning.
//!
//! Randomness comes from two independent ChaCha streams per path: one feeds
//! the Brownian increments, the other feeds jump arrivals and sizes. With
//! `λ₀ = 0` the jump stream is never touched, so a jump-free run is
//! bit-identical to a plain Euler–Maruyama drift-diffusion run on the same
//! diffusion stream.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::stats::{ln_norm_cdf, norm_cdf};

/// Grid step used when a caller does not choose one.
pub const DEFAULT_DT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JumpSizeDist {
    Exponential { mean: f64 },
    Fixed { size: f64 },
}

impl JumpSizeDist {
    pub fn mean(&self) -> f64 {
        match *self {
            JumpSizeDist::Exponential { mean } => mean,
            JumpSizeDist::Fixed { size } => size,
        }
    }

    fn validate(&self) -> Result<()> {
        let v = self.mean();
        if !v.is_finite() || v <= 0.0 {
            return Err(Error::invalid(format!(
                "jump size distribution must have a positive finite mean, got {v}"
            )));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            JumpSizeDist::Exponential { mean } => {
                let e: f64 = Exp::new(1.0).expect("unit rate").sample(rng);
                e * mean
            }
            JumpSizeDist::Fixed { size } => {
                // keep the stream discipline identical to the exponential case
                let _: f64 = rng.random();
                size
            }
        }
    }
}

/// How a raw jump draw `x` maps into a state increment `h(S-, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JumpScaling {
    /// `h(S, x) = x`
    #[default]
    Additive,
    /// `h(S, x) = x·(1 + S)`
    StateScaled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JumpDiffusionParams {
    pub s0: f64,
    /// Intercept `a` of the affine drift `a + b·S`.
    pub drift_mu: f64,
    /// Slope `b` of the affine drift.
    #[serde(default)]
    pub drift_slope: f64,
    pub sigma: f64,
    pub jump_intensity_lambda0: f64,
    pub jump_size_dist: JumpSizeDist,
    #[serde(default)]
    pub state_dep_exponent: f64,
    #[serde(default)]
    pub jump_scaling: JumpScaling,
    #[serde(default)]
    pub compensated: bool,
}

impl Default for JumpDiffusionParams {
    fn default() -> Self {
        Self {
            s0: 0.0,
            drift_mu: 0.1,
            drift_slope: 0.0,
            sigma: 0.2,
            jump_intensity_lambda0: 0.5,
            jump_size_dist: JumpSizeDist::Exponential { mean: 0.3 },
            state_dep_exponent: 0.0,
            jump_scaling: JumpScaling::Additive,
            compensated: false,
        }
    }
}

impl JumpDiffusionParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            ("s0", self.s0),
            ("drift_mu", self.drift_mu),
            ("drift_slope", self.drift_slope),
            ("sigma", self.sigma),
            ("jump_intensity_lambda0", self.jump_intensity_lambda0),
            ("state_dep_exponent", self.state_dep_exponent),
        ];
        for (name, v) in finite {
            if !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be finite, got {v}")));
            }
        }
        if self.sigma < 0.0 {
            return Err(Error::invalid("sigma must be non-negative"));
        }
        if self.jump_intensity_lambda0 < 0.0 {
            return Err(Error::invalid("jump_intensity_lambda0 must be non-negative"));
        }
        if self.state_dep_exponent < 0.0 {
            return Err(Error::invalid("state_dep_exponent must be non-negative"));
        }
        self.jump_size_dist.validate()
    }

    pub fn intensity(&self, s: f64) -> f64 {
        if self.jump_intensity_lambda0 == 0.0 {
            return 0.0;
        }
        if self.state_dep_exponent == 0.0 {
            self.jump_intensity_lambda0
        } else {
            self.jump_intensity_lambda0 * (1.0 + s).max(0.0).powf(self.state_dep_exponent)
        }
    }

    fn jump_increment(&self, s: f64, x: f64) -> f64 {
        match self.jump_scaling {
            JumpScaling::Additive => x,
            JumpScaling::StateScaled => x * (1.0 + s),
        }
    }

    fn expected_jump(&self, s: f64) -> f64 {
        self.jump_increment(s, self.jump_size_dist.mean())
    }

    pub fn drift(&self, s: f64) -> f64 {
        self.drift_mu + self.drift_slope * s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundarySpec {
    pub s_star: f64,
}

impl BoundarySpec {
    pub fn new(s_star: f64) -> Result<Self> {
        if !s_star.is_finite() {
            return Err(Error::invalid("boundary s_star must be finite"));
        }
        Ok(Self { s_star })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpilloverPath {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub jump_times: Vec<f64>,
    pub jump_sizes: Vec<f64>,
    pub seed: u64,
}

impl SpilloverPath {
    /// Value at the last grid point not after `t`.
    pub fn value_at(&self, t: f64) -> f64 {
        let idx = self.times.partition_point(|&x| x <= t + 1e-9);
        self.values[idx.saturating_sub(1)]
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "time,value,jumped,jump_size")?;
        let mut j = 0;
        for (&t, &v) in self.times.iter().zip(&self.values) {
            if j < self.jump_times.len() && self.jump_times[j] == t {
                writeln!(out, "{t},{v},1,{}", self.jump_sizes[j])?;
                j += 1;
            } else {
                writeln!(out, "{t},{v},0,0")?;
            }
        }
        Ok(())
    }
}

fn validate_grid(horizon: f64, dt: f64) -> Result<usize> {
    if !horizon.is_finite() || horizon <= 0.0 {
        return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
    }
    if !dt.is_finite() || dt <= 0.0 || dt > horizon {
        return Err(Error::invalid(format!("dt must lie in (0, horizon], got {dt}")));
    }
    Ok(((horizon / dt).round() as usize).max(1))
}

/// One Euler step shared by path simulation and the first-passage Monte Carlo.
struct Stepper<'a> {
    params: &'a JumpDiffusionParams,
    dt: f64,
    sqrt_dt: f64,
    diffusion: ChaCha8Rng,
    jumps: ChaCha8Rng,
}

impl<'a> Stepper<'a> {
    fn new(params: &'a JumpDiffusionParams, dt: f64, seed: u64, path_index: u64) -> Self {
        Self {
            params,
            dt,
            sqrt_dt: dt.sqrt(),
            diffusion: stream_rng(seed, 2 * path_index),
            jumps: stream_rng(seed, 2 * path_index + 1),
        }
    }

    /// Advance from `s`; returns the new state and the jump increment, if any.
    fn step(&mut self, s: f64) -> (f64, Option<f64>) {
        let p = self.params;
        let z: f64 = StandardNormal.sample(&mut self.diffusion);
        let mut drift = p.drift(s);
        let mut jump = None;
        if p.jump_intensity_lambda0 > 0.0 {
            let lam = p.intensity(s);
            if p.compensated {
                drift -= lam * p.expected_jump(s);
            }
            let u: f64 = self.jumps.random();
            let x = p.jump_size_dist.sample(&mut self.jumps);
            if u < (lam * self.dt).min(1.0) {
                jump = Some(p.jump_increment(s, x));
            }
        }
        let next = s + drift * self.dt + p.sigma * self.sqrt_dt * z + jump.unwrap_or(0.0);
        (next, jump)
    }
}

/// Simulate one path on the grid `0, dt, …, horizon`.
pub fn simulate_path(
    params: &JumpDiffusionParams,
    horizon: f64,
    dt: f64,
    seed: u64,
) -> Result<SpilloverPath> {
    simulate_path_indexed(params, horizon, dt, seed, 0)
}

/// Path number `path_index` of the family generated by `seed`.
pub fn simulate_path_indexed(
    params: &JumpDiffusionParams,
    horizon: f64,
    dt: f64,
    seed: u64,
    path_index: u64,
) -> Result<SpilloverPath> {
    params.validate()?;
    let n = validate_grid(horizon, dt)?;
    let step = horizon / n as f64;
    let mut stepper = Stepper::new(params, step, seed, path_index);
    let mut times = Vec::with_capacity(n + 1);
    let mut values = Vec::with_capacity(n + 1);
    let mut jump_times = Vec::new();
    let mut jump_sizes = Vec::new();
    let mut s = params.s0;
    times.push(0.0);
    values.push(s);
    for k in 1..=n {
        let (next, jump) = stepper.step(s);
        s = next;
        let t = k as f64 * step;
        if let Some(j) = jump {
            jump_times.push(t);
            jump_sizes.push(j);
        }
        times.push(t);
        values.push(s);
    }
    if !s.is_finite() {
        return Err(Error::Numerical("simulated path diverged".into()));
    }
    Ok(SpilloverPath {
        times,
        values,
        jump_times,
        jump_sizes,
        seed,
    })
}

/// Earliest grid time at which the path is at or above the boundary.
pub fn first_passage_time(path: &SpilloverPath, boundary: &BoundarySpec) -> Option<f64> {
    path.times
        .iter()
        .zip(&path.values)
        .find(|(_, &v)| v >= boundary.s_star)
        .map(|(&t, _)| t)
}

/// First passage of path `path_index` without materialising the path.
fn passage_time_streaming(
    params: &JumpDiffusionParams,
    boundary: &BoundarySpec,
    horizon: f64,
    n: usize,
    seed: u64,
    path_index: u64,
) -> Option<f64> {
    let step = horizon / n as f64;
    let mut s = params.s0;
    if s >= boundary.s_star {
        return Some(0.0);
    }
    let mut stepper = Stepper::new(params, step, seed, path_index);
    for k in 1..=n {
        s = stepper.step(s).0;
        if s >= boundary.s_star {
            return Some(k as f64 * step);
        }
    }
    None
}

/// First-passage times for `n_paths` paths (`None` = not crossed by `horizon`).
pub fn passage_times_mc(
    params: &JumpDiffusionParams,
    boundary: &BoundarySpec,
    horizon: f64,
    dt: f64,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<Option<f64>>> {
    params.validate()?;
    let n = validate_grid(horizon, dt)?;
    Ok((0..n_paths as u64)
        .into_par_iter()
        .map(|i| passage_time_streaming(params, boundary, horizon, n, seed, i))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossingEstimate {
    pub probability: f64,
    pub std_error: f64,
    pub n_paths: usize,
}

pub fn crossing_probability_mc(
    params: &JumpDiffusionParams,
    boundary: &BoundarySpec,
    horizon: f64,
    n_paths: usize,
    seed: u64,
) -> Result<CrossingEstimate> {
    crossing_probability_mc_with_dt(params, boundary, horizon, DEFAULT_DT.min(horizon), n_paths, seed)
}

pub fn crossing_probability_mc_with_dt(
    params: &JumpDiffusionParams,
    boundary: &BoundarySpec,
    horizon: f64,
    dt: f64,
    n_paths: usize,
    seed: u64,
) -> Result<CrossingEstimate> {
    if n_paths < 100 {
        return Err(Error::invalid(format!("n_paths must be at least 100, got {n_paths}")));
    }
    let times = passage_times_mc(params, boundary, horizon, dt, n_paths, seed)?;
    let hits = times.iter().filter(|t| t.is_some()).count();
    let p = hits as f64 / n_paths as f64;
    Ok(CrossingEstimate {
        probability: p,
        std_error: (p * (1.0 - p) / n_paths as f64).sqrt(),
        n_paths,
    })
}

/// `P(τ ≤ T)` for `s0 + m·t + σ·W_t` started below `s_star`.
///
/// Inverse-Gaussian first-passage law, continuous monitoring.
pub fn drifted_brownian_crossing_probability(s0: f64, s_star: f64, m: f64, sigma: f64, horizon: f64) -> f64 {
    let a = s_star - s0;
    if a <= 0.0 {
        return 1.0;
    }
    if sigma == 0.0 {
        return if m * horizon >= a { 1.0 } else { 0.0 };
    }
    let sd = sigma * horizon.sqrt();
    let first = norm_cdf((m * horizon - a) / sd);
    let log_second = 2.0 * m * a / (sigma * sigma) + ln_norm_cdf((-a - m * horizon) / sd);
    (first + log_second.exp()).clamp(0.0, 1.0)
}

/// First-order decomposition `1 − exp(−λ₀T)·P(τᶜ > T)`.
///
/// `τᶜ` is the passage time of the continuous part alone, evaluated in
/// closed form. The remainder is O(λ): every jump is treated as a crossing,
/// so the approximation degrades once `λ₀T` or the gap to the boundary
/// relative to typical jump sizes is large.
pub fn crossing_probability_decomposed(
    params: &JumpDiffusionParams,
    boundary: &BoundarySpec,
    horizon: f64,
) -> Result<f64> {
    params.validate()?;
    if params.state_dep_exponent != 0.0 {
        return Err(Error::UnsupportedConfiguration(
            "decomposition requires a constant jump intensity (state_dep_exponent = 0)".into(),
        ));
    }
    if params.drift_slope != 0.0 {
        return Err(Error::UnsupportedConfiguration(
            "decomposition requires a constant drift (drift_slope = 0)".into(),
        ));
    }
    if params.compensated && params.jump_scaling == JumpScaling::StateScaled {
        return Err(Error::UnsupportedConfiguration(
            "compensated state-scaled jumps make the continuous drift state dependent".into(),
        ));
    }
    if !horizon.is_finite() || horizon <= 0.0 {
        return Err(Error::invalid("horizon must be positive"));
    }
    let lambda = params.jump_intensity_lambda0;
    let mut m = params.drift_mu;
    if params.compensated {
        m -= lambda * params.jump_size_dist.mean();
    }
    let continuous = drifted_brownian_crossing_probability(params.s0, boundary.s_star, m, params.sigma, horizon);
    Ok(1.0 - (-lambda * horizon).exp() * (1.0 - continuous))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityCalibration {
    pub lambda0: f64,
    pub probability: f64,
    pub iterations: usize,
}

/// Bisection on `λ₀` so that the Monte Carlo crossing probability by
/// `horizon` hits `target`.
///
/// All evaluations share one seed, so the estimated probability is a
/// monotone step function of `λ₀` for uncompensated jumps.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_jump_intensity(
    base: &JumpDiffusionParams,
    boundary: &BoundarySpec,
    horizon: f64,
    target: f64,
    n_paths: usize,
    seed: u64,
    bracket: (f64, f64),
    tolerance: f64,
) -> Result<IntensityCalibration> {
    if base.compensated {
        return Err(Error::UnsupportedConfiguration(
            "intensity calibration assumes uncompensated jumps".into(),
        ));
    }
    let eval = |lambda0: f64| -> Result<f64> {
        let mut p = base.clone();
        p.jump_intensity_lambda0 = lambda0;
        Ok(crossing_probability_mc(&p, boundary, horizon, n_paths, seed)?.probability)
    };
    let (mut lo, mut hi) = bracket;
    let (p_lo, p_hi) = (eval(lo)?, eval(hi)?);
    if !(p_lo <= target && target <= p_hi) {
        return Err(Error::invalid(format!(
            "target {target} not bracketed: P(λ={lo}) = {p_lo}, P(λ={hi}) = {p_hi}"
        )));
    }
    let mut best = if (p_lo - target).abs() < (p_hi - target).abs() { (lo, p_lo) } else { (hi, p_hi) };
    let mut iterations = 0;
    while iterations < 60 && (best.1 - target).abs() > tolerance && hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        let p = eval(mid)?;
        if (p - target).abs() < (best.1 - target).abs() {
            best = (mid, p);
        }
        if p < target {
            lo = mid;
        } else {
            hi = mid;
        }
        iterations += 1;
    }
    Ok(IntensityCalibration {
        lambda0: best.0,
        probability: best.1,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn still() -> JumpDiffusionParams {
        JumpDiffusionParams {
            s0: 0.5,
            drift_mu: 0.1,
            drift_slope: 0.0,
            sigma: 0.0,
            jump_intensity_lambda0: 0.0,
            jump_size_dist: JumpSizeDist::Exponential { mean: 1.0 },
            state_dep_exponent: 0.0,
            jump_scaling: JumpScaling::Additive,
            compensated: false,
        }
    }

    #[test]
    fn noiseless_drift_is_linear() {
        let path = simulate_path(&still(), 10.0, 0.01, 3).unwrap();
        assert_eq!(path.times.len(), 1001);
        for (t, v) in path.times.iter().zip(&path.values) {
            assert!((v - (0.5 + 0.1 * t)).abs() < 1e-12);
        }
        assert!(path.jump_times.is_empty());
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let mut p = still();
        p.sigma = f64::NAN;
        assert!(matches!(simulate_path(&p, 1.0, 0.1, 0), Err(Error::InvalidParameter(_))));
        assert!(matches!(simulate_path(&still(), 1.0, 0.0, 0), Err(Error::InvalidParameter(_))));
        assert!(matches!(simulate_path(&still(), 1.0, -0.1, 0), Err(Error::InvalidParameter(_))));
        assert!(matches!(simulate_path(&still(), -1.0, 0.1, 0), Err(Error::InvalidParameter(_))));
        let mut p = still();
        p.jump_intensity_lambda0 = -1.0;
        assert!(simulate_path(&p, 1.0, 0.1, 0).is_err());
    }

    #[test]
    fn passage_time_of_linear_path() {
        let path = simulate_path(&still(), 12.0, 0.01, 0).unwrap();
        let t = first_passage_time(&path, &BoundarySpec::new(1.5).unwrap()).unwrap();
        assert!((t - 10.0).abs() <= 0.01 + 1e-9, "{t}");
        let above = JumpDiffusionParams { s0: 1.0, ..still() };
        let path = simulate_path(&above, 1.0, 0.01, 0).unwrap();
        assert_eq!(first_passage_time(&path, &BoundarySpec::new(0.5).unwrap()), Some(0.0));
        assert_eq!(first_passage_time(&path, &BoundarySpec::new(100.0).unwrap()), None);
    }

    #[test]
    fn trivial_crossing_probabilities() {
        let above = JumpDiffusionParams { s0: 2.0, ..still() };
        let b = BoundarySpec::new(1.0).unwrap();
        let est = crossing_probability_mc(&above, &b, 1.0, 200, 1).unwrap();
        assert_eq!(est.probability, 1.0);
        assert_eq!(est.std_error, 0.0);
        let frozen = JumpDiffusionParams { s0: 0.0, drift_mu: 0.0, ..still() };
        let est = crossing_probability_mc(&frozen, &b, 5.0, 200, 1).unwrap();
        assert_eq!(est.probability, 0.0);
        assert!(crossing_probability_mc(&frozen, &b, 5.0, 99, 1).is_err());
    }

    #[test]
    fn decomposition_rejects_state_dependent_intensity() {
        let p = JumpDiffusionParams {
            state_dep_exponent: 1.0,
            jump_intensity_lambda0: 0.3,
            ..still()
        };
        let b = BoundarySpec::new(1.0).unwrap();
        assert!(matches!(
            crossing_probability_decomposed(&p, &b, 1.0),
            Err(Error::UnsupportedConfiguration(_))
        ));
    }

    #[test]
    fn decomposition_without_jumps_is_the_continuous_law() {
        let p = JumpDiffusionParams {
            s0: 0.0,
            drift_mu: 0.2,
            sigma: 0.3,
            ..still()
        };
        let b = BoundarySpec::new(1.0).unwrap();
        let d = crossing_probability_decomposed(&p, &b, 5.0).unwrap();
        let c = drifted_brownian_crossing_probability(0.0, 1.0, 0.2, 0.3, 5.0);
        assert_eq!(d, c);
    }

    #[test]
    fn jump_csv_marks_jumps() {
        let p = JumpDiffusionParams {
            jump_intensity_lambda0: 5.0,
            ..still()
        };
        let path = simulate_path(&p, 2.0, 0.01, 11).unwrap();
        assert!(!path.jump_times.is_empty());
        assert!(path.jump_sizes.iter().all(|&x| x > 0.0));
        for jt in &path.jump_times {
            assert!(path.times.contains(jt));
        }
        let mut buf = Vec::new();
        path.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let jumped = text.lines().skip(1).filter(|l| l.split(',').nth(2) == Some("1")).count();
        assert_eq!(jumped, path.jump_times.len());
    }

    #[test]
    fn bisection_finds_bracketed_target() {
        let base = JumpDiffusionParams {
            s0: 0.0,
            drift_mu: 0.05,
            sigma: 0.2,
            jump_size_dist: JumpSizeDist::Exponential { mean: 0.3 },
            ..still()
        };
        let b = BoundarySpec::new(1.0).unwrap();
        let cal = calibrate_jump_intensity(&base, &b, 5.0, 0.5, 2000, 5, (0.0, 5.0), 0.01).unwrap();
        assert!((cal.probability - 0.5).abs() <= 0.01, "{cal:?}");
        assert!(calibrate_jump_intensity(&base, &b, 5.0, 0.999_999, 2000, 5, (0.0, 0.01), 0.01).is_err());
    }
}
