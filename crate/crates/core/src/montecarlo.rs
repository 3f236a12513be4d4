//! Simulation harness: scenario grid, replication loop and metrics.
//!
//! Every replication draws its panel from a seed derived from the scenario
//! seed and the replication index, and results are gathered in replication
//! order, so reports do not depend on the number of worker threads.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, BaselineResult};
use crate::cusum::{spatial_boundary_scan_auto, DEFAULT_THRESHOLD};
use crate::error::{Error, Result};
use nalgebra::DMatrix;

use crate::linalg::ols;
use crate::inference::{ddpm_bootstrap, BootstrapConfig, BootstrapResult};
use crate::pipeline::PipelineConfig;
use crate::rng::{derive_named, derive_seed, seeded};
use crate::spatial_dgp::{simulate_panel, DgpConfig, NetworkKind, Regime, SpatialPanel, HUB};
use crate::stats::{mean, order_statistic, sorted_finite};

pub const JUMP_INTENSITY_GRID: [f64; 4] = [0.0, 0.1, 0.5, 1.0];
pub const SPATIAL_RHO_GRID: [f64; 3] = [0.0, 0.3, 0.6];
pub const N_GRID: [usize; 3] = [50, 100, 500];
pub const T_GRID: [usize; 3] = [10, 20, 50];
/// Largest tolerated share of failed method runs in a scenario.
pub const MAX_FAILURE_RATE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ols,
    Fe,
    Sar,
    DdpmPe,
    DdpmBoundary,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Ols, Method::Fe, Method::Sar, Method::DdpmPe, Method::DdpmBoundary];

    pub fn label(&self) -> &'static str {
        match self {
            Method::Ols => "ols",
            Method::Fe => "fe",
            Method::Sar => "sar",
            Method::DdpmPe => "ddpm_pe",
            Method::DdpmBoundary => "ddpm_boundary",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Row label in combined tables, e.g. "A".
    pub panel: String,
    pub jump_intensity: f64,
    pub spatial_rho: f64,
    pub network_kind: NetworkKind,
    pub n: usize,
    pub t: usize,
    pub n_reps: usize,
    pub methods: Vec<Method>,
    pub seed: u64,
    /// Allow values outside the standard grids.
    pub custom: bool,
    /// Remaining DGP settings; the fields above override their counterparts.
    pub dgp: DgpConfig,
    pub pipeline: PipelineConfig,
    pub bootstrap: BootstrapConfig,
    /// Distance counted as an accurate boundary estimate.
    pub boundary_tolerance: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            panel: "A".into(),
            jump_intensity: 0.5,
            spatial_rho: 0.3,
            network_kind: NetworkKind::Sparse,
            n: 100,
            t: 20,
            n_reps: 200,
            methods: Method::ALL.to_vec(),
            seed: 0,
            custom: false,
            dgp: DgpConfig::default(),
            pipeline: PipelineConfig::default(),
            bootstrap: BootstrapConfig::default(),
            boundary_tolerance: 5.0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_reps == 0 {
            return Err(Error::invalid("n_reps must be positive"));
        }
        if self.methods.is_empty() {
            return Err(Error::invalid("at least one method is required"));
        }
        if !self.custom {
            if !JUMP_INTENSITY_GRID.contains(&self.jump_intensity) {
                return Err(Error::invalid(format!("jump_intensity {} is off the grid; set custom", self.jump_intensity)));
            }
            if !SPATIAL_RHO_GRID.contains(&self.spatial_rho) {
                return Err(Error::invalid(format!("spatial_rho {} is off the grid; set custom", self.spatial_rho)));
            }
            if !matches!(self.network_kind, NetworkKind::Sparse | NetworkKind::Dense) {
                return Err(Error::invalid("network_kind must be sparse or dense; set custom"));
            }
            if !N_GRID.contains(&self.n) || !T_GRID.contains(&self.t) {
                return Err(Error::invalid(format!("n = {}, t = {} is off the grid; set custom", self.n, self.t)));
            }
        }
        self.pipeline.validate()?;
        self.bootstrap.validate()?;
        self.replication_dgp(0).validate()
    }

    pub fn replication_seed(&self, rep: usize) -> u64 {
        derive_seed(self.seed, rep as u64)
    }

    pub fn replication_dgp(&self, rep: usize) -> DgpConfig {
        let mut d = self.dgp.clone();
        d.n_locations = self.n;
        d.n_periods = self.t;
        d.rho_ge = self.spatial_rho;
        d.network_kind = self.network_kind;
        d.spillover_params.jump_intensity_lambda0 = self.jump_intensity;
        d.seed = derive_named(self.replication_seed(rep), "dgp");
        d
    }
}

/// Regime-weighted true effect `(1 − p_GE)·τ_PE + p_GE·(τ_PE + Δ_GE)`.
pub fn regime_weighted_truth(panel: &SpatialPanel) -> Result<f64> {
    let cfg = panel
        .config
        .as_ref()
        .ok_or_else(|| Error::InvalidState("panel carries no generating config".into()))?;
    let p_ge = panel
        .true_ge_fraction()
        .ok_or_else(|| Error::InvalidState("panel carries no true regimes".into()))?;
    Ok((1.0 - p_ge) * cfg.tau_pe + p_ge * (cfg.tau_pe + cfg.delta_ge))
}

/// One method on one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: usize,
    pub method: Method,
    pub truth: f64,
    pub estimate: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub s_star_hat: Option<f64>,
    pub s_star_true: Option<f64>,
    /// Bootstrap interval for `Δ_GE` excludes zero.
    pub ge_detected: Option<bool>,
    pub error: Option<String>,
}

impl RepRecord {
    pub fn covered(&self) -> Option<bool> {
        Some(self.ci_low? <= self.truth && self.truth <= self.ci_high?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub method: Method,
    pub bias: f64,
    pub rmse: f64,
    pub coverage: f64,
    pub mean_ci_width: f64,
    /// Monte Carlo standard error of the bias.
    pub bias_se: f64,
    pub n: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: ScenarioConfig,
    pub methods: Vec<MethodMetrics>,
    /// Mean `|ŝ* − s*|` over replications with an alarm.
    pub boundary_mae: Option<f64>,
    /// Share of replications whose boundary estimate is within tolerance;
    /// replications without an alarm count as misses.
    pub boundary_within_5: Option<f64>,
    /// Share of replications whose `Δ_GE` interval excludes zero.
    pub power: Option<f64>,
    pub n_reps_completed: usize,
    #[serde(skip)]
    pub wall_time: f64,
}

impl MetricsReport {
    pub fn method(&self, m: Method) -> Option<&MethodMetrics> {
        self.methods.iter().find(|x| x.method == m)
    }
}

fn from_baseline(rep: usize, method: Method, truth: f64, r: Result<BaselineResult>) -> RepRecord {
    let mut rec = RepRecord {
        rep,
        method,
        truth,
        estimate: None,
        ci_low: None,
        ci_high: None,
        s_star_hat: None,
        s_star_true: None,
        ge_detected: None,
        error: None,
    };
    match r {
        Ok(b) => {
            rec.estimate = Some(b.tau_hat);
            rec.ci_low = Some(b.ci_low);
            rec.ci_high = Some(b.ci_high);
        }
        Err(e) => rec.error = Some(e.to_string()),
    }
    rec
}

fn from_bootstrap(
    rep: usize,
    method: Method,
    truth: f64,
    s_true: f64,
    r: Result<BootstrapResult>,
) -> RepRecord {
    let mut rec = from_baseline(rep, method, truth, Err(Error::InvalidState(String::new())));
    rec.error = None;
    match r {
        Ok(b) => {
            rec.estimate = Some(b.point.tau);
            if let Some(ci) = b.tau {
                rec.ci_low = Some(ci.low);
                rec.ci_high = Some(ci.high);
            }
            if method == Method::DdpmBoundary {
                rec.s_star_hat = b.point.s_star;
                rec.s_star_true = Some(s_true);
                rec.ge_detected = Some(b.delta_ge.is_some_and(|d| d.low > 0.0));
            }
        }
        Err(e) => rec.error = Some(e.to_string()),
    }
    rec
}

/// All methods on replication `rep`.
pub fn run_replication(config: &ScenarioConfig, rep: usize) -> Result<Vec<RepRecord>> {
    let dgp = config.replication_dgp(rep);
    let panel = simulate_panel(&dgp)?;
    let truth = regime_weighted_truth(&panel)?;
    let seed = config.replication_seed(rep);
    let mut out = Vec::with_capacity(config.methods.len());
    for &m in &config.methods {
        let rec = match m {
            Method::Ols => from_baseline(rep, m, truth, baselines::ols(&panel)),
            Method::Fe => from_baseline(rep, m, truth, baselines::fixed_effects(&panel)),
            Method::Sar => from_baseline(rep, m, truth, baselines::sar_ml(&panel)),
            Method::DdpmPe | Method::DdpmBoundary => {
                let pipeline = PipelineConfig {
                    boundary_aware: m == Method::DdpmBoundary,
                    seed: derive_named(seed, m.label()),
                    ..config.pipeline.clone()
                };
                let boot = BootstrapConfig { seed: derive_named(seed, "bootstrap"), ..config.bootstrap.clone() };
                let r = ddpm_bootstrap(&panel, &pipeline, &boot).map(|(_, b)| b);
                from_bootstrap(rep, m, truth, dgp.s_star, r)
            }
        };
        out.push(rec);
    }
    Ok(out)
}

/// Aggregate replication records into per-method metrics.
pub fn metrics_from_records(config: &ScenarioConfig, records: &[RepRecord], wall_time: f64) -> Result<MetricsReport> {
    let total = records.len();
    let failed: Vec<&RepRecord> = records.iter().filter(|r| r.error.is_some()).collect();
    if total > 0 && failed.len() as f64 > MAX_FAILURE_RATE * total as f64 {
        return Err(Error::ScenarioFailure {
            failed: failed.len(),
            total,
            first_failure: failed[0].error.clone().unwrap_or_default(),
        });
    }
    let mut methods = Vec::new();
    for &m in &config.methods {
        let ok: Vec<&RepRecord> = records.iter().filter(|r| r.method == m && r.error.is_none()).collect();
        let n_failed = records.iter().filter(|r| r.method == m && r.error.is_some()).count();
        let errs: Vec<f64> = ok.iter().filter_map(|r| Some(r.estimate? - r.truth)).collect();
        let bias = mean(&errs);
        let rmse = (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt();
        let covered: Vec<f64> = ok.iter().map(|r| if r.covered() == Some(true) { 1.0 } else { 0.0 }).collect();
        let widths: Vec<f64> = ok.iter().filter_map(|r| Some(r.ci_high? - r.ci_low?)).collect();
        let var = if errs.len() > 1 {
            errs.iter().map(|e| (e - bias).powi(2)).sum::<f64>() / (errs.len() - 1) as f64
        } else {
            0.0
        };
        methods.push(MethodMetrics {
            method: m,
            bias,
            rmse,
            coverage: mean(&covered),
            mean_ci_width: mean(&widths),
            bias_se: (var / errs.len().max(1) as f64).sqrt(),
            n: ok.len(),
            n_failed,
        });
    }
    let boundary: Vec<&RepRecord> = records
        .iter()
        .filter(|r| r.method == Method::DdpmBoundary && r.error.is_none())
        .collect();
    let (boundary_mae, boundary_within_5, power) = if boundary.is_empty() {
        (None, None, None)
    } else {
        let abs: Vec<f64> = boundary
            .iter()
            .filter_map(|r| Some((r.s_star_hat? - r.s_star_true?).abs()))
            .collect();
        let within = abs.iter().filter(|&&e| e <= config.boundary_tolerance).count() as f64 / boundary.len() as f64;
        let power = boundary.iter().filter(|r| r.ge_detected == Some(true)).count() as f64 / boundary.len() as f64;
        ((!abs.is_empty()).then(|| mean(&abs)), Some(within), Some(power))
    };
    let n_reps_completed = (0..config.n_reps)
        .filter(|&rep| records.iter().filter(|r| r.rep == rep).all(|r| r.error.is_none()))
        .filter(|&rep| records.iter().any(|r| r.rep == rep))
        .count();
    Ok(MetricsReport {
        scenario: config.clone(),
        methods,
        boundary_mae,
        boundary_within_5,
        power,
        n_reps_completed,
        wall_time,
    })
}

/// Replications `0..n_reps` of `config`, in replication order.
pub fn run_records(config: &ScenarioConfig) -> Result<Vec<RepRecord>> {
    config.validate()?;
    let per_rep: Vec<Vec<RepRecord>> = (0..config.n_reps)
        .into_par_iter()
        .map(|rep| {
            run_replication(config, rep).unwrap_or_else(|e| {
                config
                    .methods
                    .iter()
                    .map(|&m| RepRecord {
                        rep,
                        method: m,
                        truth: f64::NAN,
                        estimate: None,
                        ci_low: None,
                        ci_high: None,
                        s_star_hat: None,
                        s_star_true: None,
                        ge_detected: None,
                        error: Some(e.to_string()),
                    })
                    .collect()
            })
        })
        .collect();
    Ok(per_rep.into_iter().flatten().collect())
}

pub fn run_scenario(config: &ScenarioConfig) -> Result<MetricsReport> {
    let start = Instant::now();
    let records = run_records(config)?;
    metrics_from_records(config, &records, start.elapsed().as_secs_f64())
}

/// Scenario report together with its replication records.
#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub report: MetricsReport,
    pub records: Vec<RepRecord>,
}

pub fn run_scenario_with_records(config: &ScenarioConfig) -> Result<ScenarioRun> {
    let start = Instant::now();
    let records = run_records(config)?;
    let report = metrics_from_records(config, &records, start.elapsed().as_secs_f64())?;
    Ok(ScenarioRun { report, records })
}

/// Run several scenarios, optionally in parallel; errors stay per row.
pub fn run_grid(configs: &[ScenarioConfig], parallel: bool) -> Vec<Result<MetricsReport>> {
    if parallel {
        configs.par_iter().map(run_scenario).collect()
    } else {
        configs.iter().map(run_scenario).collect()
    }
}

fn fmt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

pub const RECORD_HEADER: &str =
    "rep,method,truth,estimate,ci_low,ci_high,covered,s_star_hat,s_star_true,ge_detected,error";

/// Per-replication CSV; floats use a round-trip representation.
pub fn write_records_csv<W: Write>(records: &[RepRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{RECORD_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.rep,
            r.method.label(),
            fmt(Some(r.truth)),
            fmt(r.estimate),
            fmt(r.ci_low),
            fmt(r.ci_high),
            r.covered().map(|c| c.to_string()).unwrap_or_default(),
            fmt(r.s_star_hat),
            fmt(r.s_star_true),
            r.ge_detected.map(|c| c.to_string()).unwrap_or_default(),
            r.error.as_deref().unwrap_or("").replace([',', '\n'], ";"),
        )?;
    }
    Ok(())
}

/// Inverse of [`write_records_csv`].
pub fn read_records_csv(text: &str) -> Result<Vec<RepRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(RECORD_HEADER) {
        return Err(Error::Parse("unexpected replication CSV header".into()));
    }
    let num = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| Error::Parse(format!("bad number {s:?}")))
        }
    };
    let flag = |s: &str| -> Option<bool> { (!s.is_empty()).then(|| s == "true") };
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.splitn(11, ',').collect();
            if f.len() != 11 {
                return Err(Error::Parse(format!("expected 11 fields in {line:?}")));
            }
            Ok(RepRecord {
                rep: f[0].parse().map_err(|_| Error::Parse(format!("bad rep {:?}", f[0])))?,
                method: Method::parse(f[1])?,
                truth: num(f[2])?.unwrap_or(f64::NAN),
                estimate: num(f[3])?,
                ci_low: num(f[4])?,
                ci_high: num(f[5])?,
                s_star_hat: num(f[7])?,
                s_star_true: num(f[8])?,
                ge_detected: flag(f[9]),
                error: (!f[10].is_empty()).then(|| f[10].to_string()),
            })
        })
        .collect()
}

pub const SUMMARY_HEADER: &str = "panel,jump_intensity,spatial_rho,network,n,t,method,bias,rmse,coverage,mean_ci_width,bias_se,n_reps,n_failed,power,boundary_mae,boundary_within_5";

/// Table rows, one per scenario and method.
pub fn write_summary_csv<W: Write>(reports: &[MetricsReport], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{SUMMARY_HEADER}")?;
    for r in reports {
        let s = &r.scenario;
        for m in &r.methods {
            let boundary = m.method == Method::DdpmBoundary;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                s.panel,
                s.jump_intensity,
                s.spatial_rho,
                s.network_kind.label(),
                s.n,
                s.t,
                m.method.label(),
                fmt(Some(m.bias)),
                fmt(Some(m.rmse)),
                fmt(Some(m.coverage)),
                fmt(Some(m.mean_ci_width)),
                fmt(Some(m.bias_se)),
                m.n,
                m.n_failed,
                fmt(r.power.filter(|_| boundary)),
                fmt(r.boundary_mae.filter(|_| boundary)),
                fmt(r.boundary_within_5.filter(|_| boundary)),
            )?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Placebo

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceboResult {
    pub true_estimate: f64,
    pub placebo: Vec<f64>,
    /// Share of placebo estimates at or above the true estimate.
    pub p_value: f64,
    /// 5th and 95th percentiles of the placebo distribution.
    pub central_90: (f64, f64),
    pub q99: f64,
}

impl PlaceboResult {
    pub fn inside_central_90(&self) -> bool {
        self.central_90.0 <= self.true_estimate && self.true_estimate <= self.central_90.1
    }
}

/// Re-estimate under random permutations of the location-level treatment.
pub fn placebo_study<F>(panel: &SpatialPanel, estimator: F, n_permutations: usize, seed: u64) -> Result<PlaceboResult>
where
    F: Fn(&SpatialPanel, u64) -> Result<f64> + Sync,
{
    if n_permutations < 100 {
        return Err(Error::invalid("placebo study needs at least 100 permutations"));
    }
    let true_estimate = estimator(panel, derive_named(seed, "true"))?;
    let treated = panel.treated_units();
    let placebo: Vec<f64> = (0..n_permutations)
        .into_par_iter()
        .map(|k| {
            let s = derive_seed(seed, k as u64);
            let mut perm = treated.clone();
            perm.shuffle(&mut seeded(derive_named(s, "permute")));
            estimator(&panel.with_treatment(&perm), derive_named(s, "estimate"))
        })
        .collect::<Result<_>>()?;
    let sorted = sorted_finite(&placebo);
    let p_value = placebo.iter().filter(|&&v| v >= true_estimate).count() as f64 / n_permutations as f64;
    Ok(PlaceboResult {
        true_estimate,
        central_90: (order_statistic(&sorted, 0.05), order_statistic(&sorted, 0.95)),
        q99: order_statistic(&sorted, 0.99),
        p_value,
        placebo,
    })
}

/// Boundary-aware point estimate of the aggregate effect, for placebo use.
pub fn ddpm_effect(panel: &SpatialPanel, pipeline: &PipelineConfig, seed: u64) -> Result<f64> {
    let cfg = PipelineConfig { seed, ..pipeline.clone() };
    Ok(crate::pipeline::run(panel, &cfg)?.effects.tau_aggregate)
}

// ---------------------------------------------------------------------------
// Threshold sensitivity

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityPoint {
    pub h: f64,
    /// Share of replications whose regime intervals cover every true
    /// regime effect present in the panel.
    pub coverage: f64,
    /// Share of replications with GE periods where the detector alarmed.
    pub detection_power: f64,
    /// Share of replications whose alarm fired at a truly PE period.
    pub type_i_rate: f64,
    pub n_reps: usize,
}

/// Boundary-aware pipeline with bootstrap at each threshold in `h_grid`.
pub fn threshold_sensitivity(config: &ScenarioConfig, h_grid: &[f64]) -> Result<Vec<SensitivityPoint>> {
    if h_grid.is_empty() {
        return Err(Error::invalid("h_grid must not be empty"));
    }
    config.validate()?;
    h_grid
        .iter()
        .map(|&h| {
            let outcomes: Vec<Result<(bool, Option<bool>, bool)>> = (0..config.n_reps)
                .into_par_iter()
                .map(|rep| sensitivity_replication(config, rep, h))
                .collect();
            let mut ok = Vec::new();
            let mut failures = Vec::new();
            for o in outcomes {
                match o {
                    Ok(v) => ok.push(v),
                    Err(e) => failures.push(e.to_string()),
                }
            }
            if failures.len() as f64 > MAX_FAILURE_RATE * config.n_reps as f64 {
                return Err(Error::ScenarioFailure {
                    failed: failures.len(),
                    total: config.n_reps,
                    first_failure: failures[0].clone(),
                });
            }
            let n = ok.len() as f64;
            let with_ge: Vec<bool> = ok.iter().filter_map(|o| o.1).collect();
            Ok(SensitivityPoint {
                h,
                coverage: ok.iter().filter(|o| o.0).count() as f64 / n,
                detection_power: with_ge.iter().filter(|&&d| d).count() as f64 / with_ge.len().max(1) as f64,
                type_i_rate: ok.iter().filter(|o| o.2).count() as f64 / n,
                n_reps: ok.len(),
            })
        })
        .collect()
}

/// `(covered, alarm when GE periods exist, alarm at a PE period)`.
fn sensitivity_replication(config: &ScenarioConfig, rep: usize, h: f64) -> Result<(bool, Option<bool>, bool)> {
    let dgp = config.replication_dgp(rep);
    let panel = simulate_panel(&dgp)?;
    let regimes = panel
        .true_regime
        .clone()
        .ok_or_else(|| Error::InvalidState("panel carries no true regimes".into()))?;
    let seed = config.replication_seed(rep);
    let pipeline = PipelineConfig {
        threshold: h,
        boundary_aware: true,
        seed: derive_named(seed, "ddpm_boundary"),
        ..config.pipeline.clone()
    };
    let boot = BootstrapConfig { seed: derive_named(seed, "bootstrap"), ..config.bootstrap.clone() };
    let (full, b) = ddpm_bootstrap(&panel, &pipeline, &boot)?;
    let has_pe = regimes.contains(&Regime::Pe);
    let has_ge = regimes.contains(&Regime::Ge);
    let covers = |ci: Option<crate::inference::Interval>, present: bool, truth: f64| match (ci, present) {
        (Some(ci), true) => ci.contains(truth),
        (None, false) => true,
        _ => false,
    };
    let covered = covers(b.tau_pe, has_pe, dgp.tau_pe) && covers(b.tau_ge, has_ge, dgp.tau_pe + dgp.delta_ge);
    let det = full.detection.as_ref().expect("boundary-aware run records detection");
    let alarm_period = det.crossed_at.map(|i| det.order[i - 1]);
    let detected = has_ge.then_some(alarm_period.is_some());
    let type_i = alarm_period.is_some_and(|t| regimes[t] == Regime::Pe);
    Ok((covered, detected, type_i))
}

// ---------------------------------------------------------------------------
// Spatial boundary accuracy

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundaryStudyConfig {
    pub n_reps: usize,
    pub seed: u64,
    /// The GE radius of each replication is uniform on this range.
    pub radius_range: (f64, f64),
    /// The jump intensity of each replication is uniform on this range.
    pub lambda_range: (f64, f64),
    pub threshold: f64,
    pub tolerance: f64,
    pub dgp: DgpConfig,
    /// Draws allowed per accepted replication before giving up.
    pub max_attempts_factor: usize,
}

impl Default for BoundaryStudyConfig {
    fn default() -> Self {
        let mut dgp = DgpConfig { noise_sd: 0.1, rho_ge: 0.3, ..DgpConfig::default() };
        dgp.spillover_params.drift_mu = 0.1;
        Self {
            n_reps: 200,
            seed: 0,
            radius_range: (25.0, 40.0),
            lambda_range: (0.5, 1.0),
            threshold: DEFAULT_THRESHOLD,
            tolerance: 5.0,
            dgp,
            max_attempts_factor: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryRecord {
    pub attempt: usize,
    pub radius: f64,
    pub s_star_hat: Option<f64>,
    /// `|ŝ* − r|`, or `r` when no boundary was flagged.
    pub abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryStudyReport {
    pub records: Vec<BoundaryRecord>,
    pub mae: f64,
    pub within_tolerance: f64,
    pub miss_rate: f64,
    /// Draws discarded because one regime had fewer than two periods.
    pub n_skipped: usize,
}

/// `(distance to hub, GE-minus-PE gap)` for each treated location.
///
/// The gap is a difference in differences on outcomes adjusted, period by
/// period, for the covariates and their spatial lags: the location's
/// outcome minus the control mean, averaged over GE periods minus the same
/// over PE periods.
pub fn unit_regime_contrasts(panel: &SpatialPanel, ge_periods: &[bool]) -> Result<Vec<(f64, f64)>> {
    let treated = panel.treated_units();
    let n_ge = ge_periods.iter().filter(|&&g| g).count();
    let n_pe = ge_periods.len() - n_ge;
    if n_ge == 0 || n_pe == 0 {
        return Err(Error::InsufficientData("both regimes need at least one period".into()));
    }
    let controls: Vec<usize> = (0..panel.n).filter(|&i| !treated[i]).collect();
    if controls.is_empty() {
        return Err(Error::DegenerateTreatment("no control locations".into()));
    }
    let y = spatially_adjusted_outcomes(panel)?;
    let control_mean: Vec<f64> = (0..panel.t)
        .map(|t| controls.iter().map(|&i| y[(i, t)]).sum::<f64>() / controls.len() as f64)
        .collect();
    Ok((0..panel.n)
        .filter(|&i| treated[i])
        .map(|i| {
            let (mut ge, mut pe) = (0.0, 0.0);
            for t in 0..panel.t {
                let gap = y[(i, t)] - control_mean[t];
                if ge_periods[t] { ge += gap } else { pe += gap }
            }
            let c = panel.network.coordinates[i];
            let dist = ((c[0] - HUB[0]).powi(2) + (c[1] - HUB[1]).powi(2)).sqrt();
            (dist, ge / n_ge as f64 - pe / n_pe as f64)
        })
        .collect())
}

/// Residuals of each period's outcomes on `[1, X, WX]`.
fn spatially_adjusted_outcomes(panel: &SpatialPanel) -> Result<DMatrix<f64>> {
    let (n, k) = (panel.n, panel.k());
    let w = &panel.network.weights;
    let mut out = DMatrix::zeros(n, panel.t);
    for t in 0..panel.t {
        let mut x = DMatrix::zeros(n, 1 + 2 * k);
        x.column_mut(0).fill(1.0);
        for (c, cov) in panel.covariates.iter().enumerate() {
            let col = cov.column(t).into_owned();
            x.set_column(1 + c, &col);
            x.set_column(1 + k + c, &(w * col));
        }
        let fit = ols(&x, &panel.outcomes.column(t).into_owned())?;
        out.set_column(t, &fit.residuals);
    }
    Ok(out)
}

/// Spatial scan accuracy on panels whose GE increment stops at a known radius.
pub fn boundary_accuracy_study(config: &BoundaryStudyConfig) -> Result<BoundaryStudyReport> {
    if config.n_reps == 0 {
        return Err(Error::invalid("n_reps must be positive"));
    }
    let max_attempts = config.n_reps * config.max_attempts_factor.max(1);
    let attempt = |a: usize| -> Result<Option<BoundaryRecord>> {
        let mut rng = seeded(derive_named(derive_seed(config.seed, a as u64), "design"));
        let radius = rng.random_range(config.radius_range.0..=config.radius_range.1);
        let lambda = rng.random_range(config.lambda_range.0..=config.lambda_range.1);
        let mut dgp = config.dgp.clone();
        dgp.ge_radius = Some(radius);
        dgp.spillover_params.jump_intensity_lambda0 = lambda;
        dgp.seed = derive_named(derive_seed(config.seed, a as u64), "dgp");
        let panel = simulate_panel(&dgp)?;
        let ge: Vec<bool> = panel
            .true_regime
            .as_ref()
            .expect("simulated panels carry regimes")
            .iter()
            .map(|&r| r == Regime::Ge)
            .collect();
        let n_ge = ge.iter().filter(|&&g| g).count();
        if n_ge < 2 || ge.len() - n_ge < 2 {
            return Ok(None);
        }
        let pairs = unit_regime_contrasts(&panel, &ge)?;
        let scan = spatial_boundary_scan_auto(&pairs, config.threshold)?;
        let abs_error = scan.step.map_or(radius, |s| (s - radius).abs());
        Ok(Some(BoundaryRecord { attempt: a, radius, s_star_hat: scan.step, abs_error }))
    };
    // draw in chunks so the accepted set is the first n_reps usable attempts
    let mut records = Vec::with_capacity(config.n_reps);
    let mut skipped = 0;
    let mut next = 0;
    while records.len() < config.n_reps && next < max_attempts {
        let end = (next + config.n_reps - records.len()).min(max_attempts);
        let batch: Vec<Result<Option<BoundaryRecord>>> = (next..end).into_par_iter().map(attempt).collect();
        for r in batch {
            match r? {
                Some(rec) if records.len() < config.n_reps => records.push(rec),
                Some(_) => {}
                None => skipped += 1,
            }
        }
        next = end;
    }
    if records.len() < config.n_reps {
        return Err(Error::InsufficientData(format!(
            "only {} of {} replications mixed both regimes",
            records.len(),
            config.n_reps
        )));
    }
    let errs: Vec<f64> = records.iter().map(|r| r.abs_error).collect();
    let n = records.len() as f64;
    Ok(BoundaryStudyReport {
        mae: mean(&errs),
        within_tolerance: records
            .iter()
            .filter(|r| r.s_star_hat.is_some() && r.abs_error <= config.tolerance)
            .count() as f64
            / n,
        miss_rate: records.iter().filter(|r| r.s_star_hat.is_none()).count() as f64 / n,
        n_skipped: skipped,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ols_only(n_reps: usize, seed: u64) -> ScenarioConfig {
        ScenarioConfig { methods: vec![Method::Ols], n_reps, seed, ..Default::default() }
    }

    #[test]
    fn off_grid_values_need_the_custom_flag() {
        let mut c = ols_only(1, 0);
        c.jump_intensity = 0.3;
        assert!(c.validate().is_err());
        c.custom = true;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn single_noiseless_rep_has_rmse_equal_to_abs_bias() {
        let mut c = ols_only(1, 4);
        c.dgp.noise_sd = 0.0;
        c.dgp.alpha_sd = 0.0;
        let r = run_scenario(&c).unwrap();
        let m = r.method(Method::Ols).unwrap();
        assert_eq!(m.rmse, m.bias.abs());
        assert_eq!(r.n_reps_completed, 1);
    }

    #[test]
    fn records_round_trip_through_csv() {
        let c = ols_only(3, 2);
        let run = run_scenario_with_records(&c).unwrap();
        let mut buf = Vec::new();
        write_records_csv(&run.records, &mut buf).unwrap();
        let back = read_records_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        let again = metrics_from_records(&c, &back, 0.0).unwrap();
        assert_eq!(again.methods, run.report.methods);
    }

    #[test]
    fn empty_grid_gives_empty_table() {
        assert!(run_grid(&[], false).is_empty());
        let mut buf = Vec::new();
        write_summary_csv(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1);
    }
}
