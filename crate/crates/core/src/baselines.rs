//! Comparison estimators: pooled OLS, fixed effects and spatial-lag ML.
//!
//! Every estimator returns a [`BaselineResult`] with a 95% normal interval
//! built from a sandwich standard error clustered by location, so that the
//! persistence of location effects across periods is reflected in the
//! interval width.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cluster_cov, log_det_from_eigen, ols as ls, weight_eigenvalues};
use crate::spatial_dgp::SpatialPanel;

const Z975: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub method: String,
    pub tau_hat: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub rho_hat: Option<f64>,
    /// Which within transformation the fixed-effects estimator applied.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transform: Option<String>,
}

impl BaselineResult {
    fn new(method: &str, tau_hat: f64, std_error: f64) -> Result<Self> {
        if !tau_hat.is_finite() || !std_error.is_finite() {
            return Err(Error::EstimationFailure(format!("{method}: non-finite estimate")));
        }
        // keep the interval proper for exact (noiseless) fits
        let se = std_error.max(1e-12);
        Ok(Self {
            method: method.to_string(),
            tau_hat,
            std_error: se,
            ci_low: tau_hat - Z975 * se,
            ci_high: tau_hat + Z975 * se,
            rho_hat: None,
            transform: None,
        })
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.ci_low <= truth && truth <= self.ci_high
    }
}

/// Pooled design `[1, D, X…]` with rows ordered location-major.
fn pooled_design(panel: &SpatialPanel) -> (DMatrix<f64>, DVector<f64>, Vec<usize>) {
    let (n, t, k) = (panel.n, panel.t, panel.k());
    let rows = n * t;
    let mut x = DMatrix::zeros(rows, 2 + k);
    let mut y = DVector::zeros(rows);
    let mut cluster = Vec::with_capacity(rows);
    for i in 0..n {
        for s in 0..t {
            let r = i * t + s;
            x[(r, 0)] = 1.0;
            x[(r, 1)] = panel.treatment[(i, s)];
            for (c, cov) in panel.covariates.iter().enumerate() {
                x[(r, 2 + c)] = cov[(i, s)];
            }
            y[r] = panel.outcomes[(i, s)];
            cluster.push(i);
        }
    }
    (x, y, cluster)
}

fn check_treatment_variation(panel: &SpatialPanel) -> Result<()> {
    let first = panel.treatment[(0, 0)];
    if panel.treatment.iter().all(|&d| d == first) {
        return Err(Error::DegenerateTreatment(
            "treatment is constant across all observations".into(),
        ));
    }
    Ok(())
}

/// Pooled OLS of `Y` on `(1, D, X)`.
pub fn ols(panel: &SpatialPanel) -> Result<BaselineResult> {
    panel.validate()?;
    check_treatment_variation(panel)?;
    let (x, y, cluster) = pooled_design(panel);
    let fit = ls(&x, &y)?;
    let cov = cluster_cov(&x, &fit, &cluster);
    BaselineResult::new("ols", fit.coef[1], cov[(1, 1)].max(0.0).sqrt())
}

/// Within estimator.
///
/// Demeans by location when treatment varies within locations; otherwise the
/// location transform would absorb `D`, so the estimator demeans by period
/// instead and records `transform = "time"`.
pub fn fixed_effects(panel: &SpatialPanel) -> Result<BaselineResult> {
    panel.validate()?;
    if panel.t < 2 {
        return Err(Error::invalid("fixed effects need at least two periods"));
    }
    let within_location = (0..panel.n).any(|i| {
        let d0 = panel.treatment[(i, 0)];
        (1..panel.t).any(|s| panel.treatment[(i, s)] != d0)
    });
    let (x, y, cluster) = pooled_design(panel);
    let (n, t) = (panel.n, panel.t);
    let cols = x.ncols() - 1;
    // drop the intercept, demean the rest
    let mut xd = x.columns(1, cols).into_owned();
    let mut yd = y.clone();
    let demean = |m: &mut DVector<f64>, groups: &[Vec<usize>]| {
        for g in groups {
            let avg = g.iter().map(|&r| m[r]).sum::<f64>() / g.len() as f64;
            for &r in g {
                m[r] -= avg;
            }
        }
    };
    let groups: Vec<Vec<usize>> = if within_location {
        (0..n).map(|i| (0..t).map(|s| i * t + s).collect()).collect()
    } else {
        (0..t).map(|s| (0..n).map(|i| i * t + s).collect()).collect()
    };
    demean(&mut yd, &groups);
    for c in 0..cols {
        let mut col = xd.column(c).into_owned();
        demean(&mut col, &groups);
        xd.set_column(c, &col);
    }
    if xd.column(0).iter().all(|v| v.abs() < 1e-12) {
        return Err(Error::DegenerateTreatment(
            "treatment has no variation left after the within transformation; \
             use pooled OLS or add treatment timing variation"
                .into(),
        ));
    }
    let fit = ls(&xd, &yd)?;
    let cov = cluster_cov(&xd, &fit, &cluster);
    let mut r = BaselineResult::new("fe", fit.coef[0], cov[(0, 0)].max(0.0).sqrt())?;
    r.transform = Some(if within_location { "location" } else { "time" }.to_string());
    Ok(r)
}

/// Concentrated log-likelihood pieces for `y = ρWy + Xβ + ε` stacked over periods.
struct Profile {
    e0e0: f64,
    e0el: f64,
    elel: f64,
    n_obs: f64,
    periods: f64,
}

impl Profile {
    fn loglik(&self, rho: f64, eig: &[(f64, f64)]) -> f64 {
        let ssr = (self.e0e0 - 2.0 * rho * self.e0el + rho * rho * self.elel).max(1e-300);
        -0.5 * self.n_obs * (ssr / self.n_obs).ln() + self.periods * log_det_from_eigen(eig, rho)
    }
}

const RHO_BOUND: f64 = 0.99;

/// Maximise a 1-D concave-ish profile on `(−0.99, 0.99)`: coarse grid, then
/// golden-section refinement around the best grid point.
fn maximise_rho(f: impl Fn(f64) -> f64) -> Result<(f64, f64)> {
    let grid: Vec<f64> = (0..=40).map(|i| -RHO_BOUND + 2.0 * RHO_BOUND * i as f64 / 40.0).collect();
    let vals: Vec<f64> = grid.iter().map(|&r| f(r)).collect();
    if vals.iter().any(|v| v.is_nan()) {
        return Err(Error::EstimationFailure("profile likelihood is not finite".into()));
    }
    let best = (0..grid.len())
        .max_by(|&a, &b| vals[a].total_cmp(&vals[b]).then(b.cmp(&a)))
        .expect("non-empty grid");
    let mut lo = grid[best.saturating_sub(1)];
    let mut hi = grid[(best + 1).min(grid.len() - 1)];
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..80 {
        if hi - lo < 1e-10 {
            break;
        }
        if f1 >= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        }
    }
    let rho = 0.5 * (lo + hi);
    let val = f(rho);
    if !val.is_finite() {
        return Err(Error::EstimationFailure("golden-section search left the finite region".into()));
    }
    // the grid maximum can beat the refined point only if the profile is flat
    if vals[best] > val {
        return Ok((grid[best], vals[best]));
    }
    Ok((rho, val))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SarProfileFit {
    pub rho: f64,
    pub loglik: f64,
    pub loglik_at_zero: f64,
}

/// Pooled SAR fit with one `ρ` for all periods; used for weight selection.
pub fn sar_profile(panel: &SpatialPanel, w: &DMatrix<f64>, eig: &[(f64, f64)]) -> Result<SarProfileFit> {
    let (x, y, _) = pooled_design(panel);
    let (n, t) = (panel.n, panel.t);
    let mut wy = DVector::zeros(n * t);
    for s in 0..t {
        let col = w * panel.outcomes.column(s);
        for i in 0..n {
            wy[i * t + s] = col[i];
        }
    }
    let e0 = ls(&x, &y)?.residuals;
    let el = ls(&x, &wy)?.residuals;
    let prof = Profile {
        e0e0: e0.dot(&e0),
        e0el: e0.dot(&el),
        elel: el.dot(&el),
        n_obs: (n * t) as f64,
        periods: t as f64,
    };
    let (rho, loglik) = maximise_rho(|r| prof.loglik(r, eig))?;
    Ok(SarProfileFit {
        rho,
        loglik,
        loglik_at_zero: prof.loglik(0.0, eig),
    })
}

/// Likelihood-ratio statistic for `ρ = 0` after removing location means.
///
/// Time-demeaning commutes with `W`, so the transformed panel is again a SAR
/// model but without persistent location effects, which would otherwise make
/// pooled periods look like independent evidence. Each location loses one
/// degree of freedom, leaving `T − 1` effective periods.
pub fn sar_within_lr(panel: &SpatialPanel, w: &DMatrix<f64>, eig: &[(f64, f64)]) -> Result<f64> {
    let (n, t) = (panel.n, panel.t);
    if t < 2 {
        return Err(Error::invalid("within transformation needs at least two periods"));
    }
    let demean = |m: &DMatrix<f64>| {
        let mut out = m.clone();
        for i in 0..n {
            let mean = m.row(i).mean();
            out.row_mut(i).add_scalar_mut(-mean);
        }
        out
    };
    let y = demean(&panel.outcomes);
    let wy = w * &y;
    let mut regressors: Vec<DMatrix<f64>> = Vec::new();
    for m in std::iter::once(&panel.treatment).chain(panel.covariates.iter()) {
        let d = demean(m);
        if d.norm() > 1e-10 * m.norm().max(1.0) {
            regressors.push(d);
        }
    }
    let flat = |m: &DMatrix<f64>| DVector::from_iterator(n * t, (0..n).flat_map(|i| (0..t).map(move |s| (i, s))).map(|(i, s)| m[(i, s)]));
    let (yv, wyv) = (flat(&y), flat(&wy));
    let (e0, el) = if regressors.is_empty() {
        (yv, wyv)
    } else {
        let mut x = DMatrix::zeros(n * t, regressors.len());
        for (c, m) in regressors.iter().enumerate() {
            x.set_column(c, &flat(m));
        }
        (ls(&x, &yv)?.residuals, ls(&x, &wyv)?.residuals)
    };
    let prof = Profile {
        e0e0: e0.dot(&e0),
        e0el: e0.dot(&el),
        elel: el.dot(&el),
        n_obs: (n * (t - 1)) as f64,
        periods: (t - 1) as f64,
    };
    let (_, loglik) = maximise_rho(|r| prof.loglik(r, eig))?;
    Ok(2.0 * (loglik - prof.loglik(0.0, eig)))
}

struct PeriodFit {
    tau: f64,
    rho: f64,
    /// Influence of each location on `τ̂_t`.
    influence: Vec<f64>,
}

/// ML fit for one cross-section with per-location influence functions.
///
/// The scores are `x_i e_i` for `β` and `(Wy)_i e_i − σ²(WA⁻¹)_ii` for
/// `ρ`; each has mean zero at the truth, which lets the sandwich be
/// assembled location by location.
fn sar_period(
    w: &DMatrix<f64>,
    eig: &[(f64, f64)],
    x: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<PeriodFit> {
    let n = y.len();
    let k = x.ncols();
    let wy = w * y;
    let fit0 = ls(x, y)?;
    let fitl = ls(x, &wy)?;
    let (e0, el) = (&fit0.residuals, &fitl.residuals);
    let prof = Profile {
        e0e0: e0.dot(e0),
        e0el: e0.dot(el),
        elel: el.dot(el),
        n_obs: n as f64,
        periods: 1.0,
    };
    let (rho, _) = maximise_rho(|r| prof.loglik(r, eig))?;
    let beta = &fit0.coef - &fitl.coef * rho;
    let e = y - &wy * rho - x * &beta;
    let sigma2 = e.dot(&e) / n as f64;

    let a = DMatrix::identity(n, n) - w * rho;
    let a_inv = a
        .try_inverse()
        .ok_or_else(|| Error::EstimationFailure(format!("I − ρW singular at ρ = {rho}")))?;
    let g = w * &a_inv;
    let g2 = &g * &g;
    let tr_g = g.trace();

    let p = k + 1;
    let mut scores = DMatrix::zeros(n, p);
    for i in 0..n {
        for c in 0..k {
            scores[(i, c)] = x[(i, c)] * e[i];
        }
        scores[(i, k)] = wy[i] * e[i] - sigma2 * g[(i, i)];
    }
    let mut h = DMatrix::zeros(p, p);
    for i in 0..n {
        for c in 0..k {
            for d in 0..k {
                h[(c, d)] -= x[(i, c)] * x[(i, d)];
            }
            h[(c, k)] -= x[(i, c)] * wy[i];
            h[(k, c)] -= wy[i] * x[(i, c)];
        }
        h[(k, k)] -= wy[i] * wy[i] + sigma2 * g2[(i, i)];
    }
    // σ̂² moves with ρ through the residuals
    h[(k, k)] += 2.0 * wy.dot(&e) / n as f64 * tr_g;
    let h_inv = h
        .try_inverse()
        .ok_or_else(|| Error::EstimationFailure("singular SAR information matrix".into()))?;
    let row = -h_inv.row(1);
    let influence = (0..n).map(|i| row.dot(&scores.row(i))).collect();
    Ok(PeriodFit { tau: beta[1], rho, influence })
}

/// Per-period spatial-lag ML, pooled across periods by inverse variance.
///
/// The pooled standard error sums each location's weighted influence over
/// periods before squaring, so it stays valid when location effects persist.
pub fn sar_ml(panel: &SpatialPanel) -> Result<BaselineResult> {
    sar_ml_with(panel, &panel.network.weights, &panel.network.eigenvalues())
}

pub fn sar_ml_with(panel: &SpatialPanel, w: &DMatrix<f64>, eig: &[(f64, f64)]) -> Result<BaselineResult> {
    panel.validate()?;
    check_treatment_variation(panel)?;
    if w.shape() != (panel.n, panel.n) {
        return Err(Error::invalid("weights do not match the panel"));
    }
    if eig.iter().any(|&(re, im)| (re * re + im * im).sqrt() > 1.0 + 1e-8) {
        return Err(Error::invalid("weights have eigenvalues outside the unit disc"));
    }
    let (n, k) = (panel.n, panel.k());
    let mut fits = Vec::with_capacity(panel.t);
    for s in 0..panel.t {
        let mut x = DMatrix::zeros(n, 2 + k);
        for i in 0..n {
            x[(i, 0)] = 1.0;
            x[(i, 1)] = panel.treatment[(i, s)];
            for (c, cov) in panel.covariates.iter().enumerate() {
                x[(i, 2 + c)] = cov[(i, s)];
            }
        }
        let y = panel.outcomes.column(s).into_owned();
        fits.push(sar_period(w, eig, &x, &y)?);
    }
    let vars: Vec<f64> = fits
        .iter()
        .map(|f| f.influence.iter().map(|v| v * v).sum::<f64>().max(1e-300))
        .collect();
    let total: f64 = vars.iter().map(|v| 1.0 / v).sum();
    let weights: Vec<f64> = vars.iter().map(|v| (1.0 / v) / total).collect();
    let tau = fits.iter().zip(&weights).map(|(f, w)| w * f.tau).sum();
    let rho = fits.iter().zip(&weights).map(|(f, w)| w * f.rho).sum();
    let mut var = 0.0;
    for i in 0..n {
        let z: f64 = fits.iter().zip(&weights).map(|(f, w)| w * f.influence[i]).sum();
        var += z * z;
    }
    var *= n as f64 / (n as f64 - 1.0);
    let mut r = BaselineResult::new("sar", tau, var.sqrt())?;
    r.rho_hat = Some(rho);
    Ok(r)
}

/// Eigenvalues of arbitrary weights, row-normalised or not.
pub fn eigenvalues_of(w: &DMatrix<f64>) -> Vec<(f64, f64)> {
    weight_eigenvalues(w, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial_dgp::{simulate_panel, DgpConfig};

    fn noiseless(seed: u64) -> DgpConfig {
        DgpConfig {
            rho_ge: 0.0,
            delta_ge: 0.0,
            noise_sd: 0.0,
            seed,
            ..DgpConfig::default()
        }
    }

    #[test]
    fn ols_is_exact_without_noise_or_spillovers() {
        let p = simulate_panel(&DgpConfig { alpha_sd: 0.0, ..noiseless(1) }).unwrap();
        let r = ols(&p).unwrap();
        assert!((r.tau_hat - 0.2).abs() < 1e-10, "{r:?}");
        assert!(r.ci_low <= r.tau_hat && r.tau_hat <= r.ci_high);
    }

    #[test]
    fn fe_switches_to_time_demeaning() {
        let p = simulate_panel(&noiseless(2)).unwrap();
        let r = fixed_effects(&p).unwrap();
        assert_eq!(r.transform.as_deref(), Some("time"));
    }

    #[test]
    fn constant_treatment_is_degenerate() {
        let p = simulate_panel(&noiseless(3)).unwrap();
        let all = p.with_treatment(&vec![true; p.n]);
        assert!(matches!(ols(&all), Err(Error::DegenerateTreatment(_))));
        assert!(matches!(fixed_effects(&all), Err(Error::DegenerateTreatment(_))));
    }

    #[test]
    fn sar_recovers_noiseless_effect() {
        let p = simulate_panel(&DgpConfig { alpha_sd: 0.0, beta: vec![0.0, 0.0], ..noiseless(4) }).unwrap();
        let r = sar_ml(&p).unwrap();
        assert!((r.tau_hat - 0.2).abs() < 1e-6, "{r:?}");
    }
}
