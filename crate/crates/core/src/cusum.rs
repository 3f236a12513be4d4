//! Page's CUSUM on Gaussian log-likelihood ratios.
//!
//! `C_n = max(0, C_{n−1} + g(Y_n) − k)` with `g = ln f₁/f₀`. The detector
//! alarms the first time `C_n` reaches `h`; the alarm is latched while the
//! statistic keeps running.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{mean, std_dev};

/// Fraction of a stream used to fit the in-control model by default.
pub const BURN_IN_FRACTION: f64 = 0.2;
pub const DEFAULT_THRESHOLD: f64 = 5.0;

/// Relative slack when comparing `C_n` with `h`, so that an exact tie is not
/// lost to summation roundoff.
const TIE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianModel {
    pub mean: f64,
    pub sd: f64,
}

impl GaussianModel {
    pub fn log_density(&self, y: f64) -> f64 {
        let z = (y - self.mean) / self.sd;
        -0.5 * z * z - self.sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    }
}

/// `KL(a ‖ b)` for univariate Gaussians.
pub fn gaussian_kl(a: &GaussianModel, b: &GaussianModel) -> f64 {
    (b.sd / a.sd).ln() + (a.sd * a.sd + (a.mean - b.mean).powi(2)) / (2.0 * b.sd * b.sd) - 0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CusumConfig {
    pub k: f64,
    pub h: f64,
    pub pe_model: GaussianModel,
    pub ge_model: GaussianModel,
}

impl CusumConfig {
    pub fn new(k: f64, h: f64, pe_model: GaussianModel, ge_model: GaussianModel) -> Result<Self> {
        let c = Self { k, h, pe_model, ge_model };
        c.validate()?;
        Ok(c)
    }

    /// Allowance `k = ½·KL(f₁‖f₀)` with the given threshold.
    pub fn with_default_allowance(h: f64, pe_model: GaussianModel, ge_model: GaussianModel) -> Result<Self> {
        Self::new(0.5 * gaussian_kl(&ge_model, &pe_model), h, pe_model, ge_model)
    }

    /// `f₀` fitted on the leading 20% of `series`, `f₁` shifted up by one
    /// standard deviation, default allowance.
    pub fn estimate_from_stream(series: &[f64], h: f64) -> Result<Self> {
        let burn = ((series.len() as f64 * BURN_IN_FRACTION).ceil() as usize).max(2);
        if series.len() < burn {
            return Err(Error::InsufficientData(format!(
                "need at least {burn} observations to fit the in-control model"
            )));
        }
        let head = &series[..burn];
        let mu = mean(head);
        let sd = floor_sd(std_dev(head), mu);
        Self::with_default_allowance(h, GaussianModel { mean: mu, sd }, GaussianModel { mean: mu + sd, sd })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0) || !self.h.is_finite() {
            return Err(Error::invalid(format!("threshold h must be positive, got {}", self.h)));
        }
        if !self.k.is_finite() {
            return Err(Error::invalid("drift allowance k must be finite"));
        }
        for m in [self.pe_model, self.ge_model] {
            if !(m.sd > 0.0) || !m.sd.is_finite() || !m.mean.is_finite() {
                return Err(Error::invalid("observation models need finite means and positive sds"));
            }
        }
        Ok(())
    }
}

/// Keep a fitted sd strictly positive for constant streams.
pub(crate) fn floor_sd(sd: f64, level: f64) -> f64 {
    let floor = 1e-9 * level.abs().max(1.0);
    if sd.is_finite() && sd > floor { sd } else { floor }
}

pub fn llr(y: f64, config: &CusumConfig) -> f64 {
    config.ge_model.log_density(y) - config.pe_model.log_density(y)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CusumState {
    pub c: f64,
    pub n: usize,
    /// 1-based index of the first observation at which `C_n ≥ h`.
    pub crossed_at: Option<usize>,
}

impl CusumState {
    /// Advance with a precomputed increment `g_n − k`.
    pub fn step(mut self, increment: f64, h: f64) -> Self {
        self.n += 1;
        self.c = (self.c + increment).max(0.0);
        if self.crossed_at.is_none() && self.c >= h * (1.0 - TIE_SLACK) {
            self.crossed_at = Some(self.n);
        }
        self
    }
}

pub fn update(state: CusumState, y: f64, config: &CusumConfig) -> CusumState {
    state.step(llr(y, config) - config.k, config.h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub crossed_at: Option<usize>,
    /// `C_n` after each observation.
    pub trace: Vec<f64>,
    /// Observations up to and including the last reset to zero before the
    /// alarm; the classical change-point estimate.
    pub last_reset: Option<usize>,
}

pub fn detect_with_trace(series: &[f64], config: &CusumConfig) -> Detection {
    let mut state = CusumState::default();
    let mut trace = Vec::with_capacity(series.len());
    let mut last_zero = 0;
    let mut last_reset = None;
    for &y in series {
        state = update(state, y, config);
        trace.push(state.c);
        if state.crossed_at.is_none() && state.c == 0.0 {
            last_zero = state.n;
        }
        if state.crossed_at == Some(state.n) {
            last_reset = Some(last_zero);
        }
    }
    Detection {
        crossed_at: state.crossed_at,
        trace,
        last_reset,
    }
}

pub fn detect_series(series: &[f64], config: &CusumConfig) -> Option<usize> {
    series
        .iter()
        .try_fold(CusumState::default(), |s, &y| {
            let next = update(s, y, config);
            if next.crossed_at.is_some() { Err(next) } else { Ok(next) }
        })
        .err()
        .and_then(|s| s.crossed_at)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialBoundary {
    /// Distance at the alarm, if any.
    pub s_star: Option<f64>,
    /// Distance of the first observation of the run-up that ended in the
    /// alarm; the change-point estimate of where the shift begins.
    pub onset: Option<f64>,
    /// Midpoint between the two neighbouring distances that split the scan
    /// into the best-fitting upward two-level step, reported only when the
    /// CUSUM alarms.
    pub step: Option<f64>,
    /// 1-based position of the alarm in the far-to-near ordering.
    pub crossed_at: Option<usize>,
    pub config: CusumConfig,
    /// `(distance, C_n)` in scan order.
    pub trace: Vec<(f64, f64)>,
}

fn far_to_near(pairs: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
    if pairs.len() < 10 {
        return Err(Error::InsufficientData(format!(
            "spatial scan needs at least 10 distance-effect pairs, got {}",
            pairs.len()
        )));
    }
    if pairs.iter().any(|(d, e)| !d.is_finite() || !e.is_finite()) {
        return Err(Error::invalid("distance-effect pairs must be finite"));
    }
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(sorted)
}

/// Least-squares split of `values` into an upward two-level step.
///
/// Returns the index `j` of the first element of the upper segment, chosen
/// to maximise `j(n−j)/n·(b̄ − ā)²` over splits with `b̄ > ā`.
pub fn step_split(values: &[f64]) -> Option<usize> {
    let n = values.len();
    let total: f64 = values.iter().sum();
    let mut head = 0.0;
    let mut best: Option<(f64, usize)> = None;
    for j in 1..n {
        head += values[j - 1];
        let a = head / j as f64;
        let b = (total - head) / (n - j) as f64;
        let score = (j * (n - j)) as f64 / n as f64 * (b - a).powi(2);
        if b > a && best.is_none_or(|(s, _)| score > s) {
            best = Some((score, j));
        }
    }
    best.map(|(_, j)| j)
}

/// Scan effects from the far field inwards and report where a level shift
/// is first flagged.
pub fn spatial_boundary_scan(pairs: &[(f64, f64)], config: &CusumConfig) -> Result<SpatialBoundary> {
    config.validate()?;
    let sorted = far_to_near(pairs)?;
    let effects: Vec<f64> = sorted.iter().map(|p| p.1).collect();
    let det = detect_with_trace(&effects, config);
    Ok(SpatialBoundary {
        s_star: det.crossed_at.map(|i| sorted[i - 1].0),
        onset: det.last_reset.map(|r| sorted[r.min(sorted.len() - 1)].0),
        step: det.crossed_at.and_then(|_| step_split(&effects)).map(|j| 0.5 * (sorted[j - 1].0 + sorted[j].0)),
        crossed_at: det.crossed_at,
        config: *config,
        trace: sorted.iter().map(|p| p.0).zip(det.trace).collect(),
    })
}

/// [`spatial_boundary_scan`] with models fitted on the farthest 20%.
pub fn spatial_boundary_scan_auto(pairs: &[(f64, f64)], h: f64) -> Result<SpatialBoundary> {
    let sorted = far_to_near(pairs)?;
    let effects: Vec<f64> = sorted.iter().map(|p| p.1).collect();
    let config = CusumConfig::estimate_from_stream(&effects, h)?;
    spatial_boundary_scan(pairs, &config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_shift() -> CusumConfig {
        CusumConfig::new(
            0.0,
            5.0,
            GaussianModel { mean: 0.0, sd: 1.0 },
            GaussianModel { mean: 1.0, sd: 1.0 },
        )
        .unwrap()
    }

    #[test]
    fn llr_hand_values() {
        let c = unit_shift();
        assert_eq!(llr(0.5, &c), 0.0);
        assert!((llr(1.0, &c) - 0.5).abs() < 1e-15);
        let same = CusumConfig { ge_model: c.pe_model, ..c };
        assert_eq!(llr(3.7, &same), 0.0);
    }

    #[test]
    fn default_allowance_is_half_kl() {
        let c = CusumConfig::with_default_allowance(
            5.0,
            GaussianModel { mean: 0.0, sd: 2.0 },
            GaussianModel { mean: 2.0, sd: 2.0 },
        )
        .unwrap();
        assert!((c.k - 0.25).abs() < 1e-15);
    }

    #[test]
    fn reflected_at_zero() {
        let mut s = CusumState::default();
        for _ in 0..1000 {
            s = s.step(-1.0, 5.0);
            assert_eq!(s.c, 0.0);
        }
        assert_eq!(s.crossed_at, None);
    }

    #[test]
    fn arithmetic_crossing() {
        let mut s = CusumState::default();
        for _ in 0..200 {
            s = s.step(0.05, 5.0);
        }
        assert_eq!(s.crossed_at, Some(100));
    }

    #[test]
    fn crafted_stream_crosses_at_115() {
        // 114 observations build C up to 4.9, the 115th pushes it over
        let mut s = CusumState::default();
        let mut incs = vec![-0.3; 60];
        incs.extend(std::iter::repeat_n(4.9 / 54.0, 54));
        incs.push(0.5);
        incs.extend([1.0; 10]);
        for g in incs {
            s = s.step(g, 5.0);
        }
        assert_eq!(s.crossed_at, Some(115));
    }

    #[test]
    fn latched_crossing_keeps_running() {
        let mut s = CusumState::default();
        for g in [3.0, 3.0, -10.0, 8.0] {
            s = s.step(g, 5.0);
        }
        assert_eq!(s.crossed_at, Some(2));
        assert_eq!(s.c, 8.0);
        assert_eq!(s.n, 4);
    }

    #[test]
    fn empty_and_flat_series() {
        let c = unit_shift();
        assert_eq!(detect_series(&[], &c), None);
        // y = 0 gives g = −0.5 under the unit shift
        assert_eq!(detect_series(&[0.0; 500], &c), None);
    }

    #[test]
    fn step_split_finds_a_clean_step() {
        let mut v = vec![0.0; 7];
        v.extend([1.0; 5]);
        assert_eq!(step_split(&v), Some(7));
        assert_eq!(step_split(&[1.0, 0.0]), None);
        assert_eq!(step_split(&[]), None);
    }

    #[test]
    fn step_location_sits_between_the_regimes() {
        // far locations flat, near ones shifted up by 2
        let pairs: Vec<(f64, f64)> = (0..40).map(|i| (i as f64, if i < 15 { 2.0 } else { 0.0 } + 0.01 * (i % 3) as f64)).collect();
        let b = spatial_boundary_scan_auto(&pairs, 5.0).unwrap();
        assert_eq!(b.step, Some(14.5));
    }

    #[test]
    fn spatial_scan_needs_ten_pairs() {
        let pairs: Vec<(f64, f64)> = (0..9).map(|i| (i as f64, 0.2)).collect();
        assert!(matches!(spatial_boundary_scan_auto(&pairs, 5.0), Err(Error::InsufficientData(_))));
        let pairs: Vec<(f64, f64)> = (0..50).map(|i| (i as f64, 0.2)).collect();
        assert_eq!(spatial_boundary_scan_auto(&pairs, 5.0).unwrap().s_star, None);
    }
}
