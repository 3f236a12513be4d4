//! Subcommand bodies.
//!
//! Seeds: every random component draws from `derive_named(seed, tag)` with
//! the tags `path`, `crossing`, `dgp`, `pipeline`, `bootstrap` and
//! `placebo`; Monte Carlo and sensitivity scenarios take the root seed
//! directly and derive per-replication seeds from it, so all scenarios of a
//! grid share common random numbers.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use stochbound::baselines::{self, BaselineResult};
use stochbound::cusum::{detect_with_trace, spatial_boundary_scan_auto, CusumConfig};
use stochbound::inference::{ddpm_bootstrap, write_bootstrap, BootstrapConfig};
use stochbound::montecarlo::{
    ddpm_effect, placebo_study, regime_weighted_truth, run_scenario_with_records, threshold_sensitivity,
    write_records_csv, write_summary_csv, MetricsReport, Method, ScenarioConfig,
};
use stochbound::pipeline::{self, PipelineConfig};
use stochbound::policy::{compare_pe_vs_ge_targeting, select_targets, PolicyInputs, Selector};
use stochbound::rng::derive_named;
use stochbound::spatial_dgp::{read_panel, simulate_panel as simulate_dgp_panel, write_panel, DgpConfig, SpatialPanel};
use stochbound::stochastic_process::{
    crossing_probability_decomposed, crossing_probability_mc_with_dt, first_passage_time,
    simulate_path as simulate_spillover_path, BoundarySpec, JumpDiffusionParams,
};

use crate::config::{load, Loaded};
use crate::error::CliError;
use crate::manifest::Artifacts;
use crate::{Common, PanelArg, DEFAULT_SEED};

fn setup<T: serde::de::DeserializeOwned + Default>(common: &Common) -> Result<(T, u64), CliError> {
    let Loaded { config, manifest_seed } = load::<T>(common.config.as_deref())?;
    let seed = common.seed.or(manifest_seed).unwrap_or(DEFAULT_SEED);
    Ok((config, seed))
}

fn progress(common: &Common, msg: impl AsRef<str>) {
    if common.verbose > 0 {
        eprintln!("{}", msg.as_ref());
    }
}

fn invalid(e: stochbound::Error) -> CliError {
    CliError::Runtime(e.to_string())
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatePathConfig {
    pub process: JumpDiffusionParams,
    pub horizon: f64,
    pub dt: f64,
    pub boundary: f64,
    /// Paths for the Monte Carlo crossing probability.
    pub n_paths: usize,
}

impl Default for SimulatePathConfig {
    fn default() -> Self {
        Self { process: JumpDiffusionParams::default(), horizon: 10.0, dt: 0.01, boundary: 1.0, n_paths: 1000 }
    }
}

pub fn simulate_path(common: &Common) -> Result<(), CliError> {
    let (cfg, seed) = setup::<SimulatePathConfig>(common)?;
    let boundary = BoundarySpec::new(cfg.boundary)?;
    let path = simulate_spillover_path(&cfg.process, cfg.horizon, cfg.dt, derive_named(seed, "path"))?;
    let mut out = Artifacts::new(&common.out)?;
    out.write("path.csv", &csv_bytes(|b| path.write_csv(b))?)?;
    let mc = crossing_probability_mc_with_dt(&cfg.process, &boundary, cfg.horizon, cfg.dt, cfg.n_paths, derive_named(seed, "crossing"))?;
    #[derive(Serialize)]
    struct Passage {
        first_passage: Option<f64>,
        n_jumps: usize,
        crossing_probability: f64,
        mc_std_error: f64,
        /// Semi-analytic value; absent when the process is outside its scope.
        decomposed_probability: Option<f64>,
    }
    out.write_json(
        "passage.json",
        &Passage {
            first_passage: first_passage_time(&path, &boundary),
            n_jumps: path.jump_times.len(),
            crossing_probability: mc.probability,
            mc_std_error: mc.std_error,
            decomposed_probability: crossing_probability_decomposed(&cfg.process, &boundary, cfg.horizon).ok(),
        },
    )?;
    out.finish("simulate-path", seed, &cfg)
}

// ---------------------------------------------------------------------------

fn panel_files(out: &mut Artifacts) -> Result<(), CliError> {
    for f in ["outcomes.csv", "treatment.csv", "covariates.csv", "panel.json"] {
        out.adopt(f)?;
    }
    Ok(())
}

pub fn simulate_panel(common: &Common) -> Result<(), CliError> {
    let (mut cfg, seed) = setup::<DgpConfig>(common)?;
    cfg.seed = derive_named(seed, "dgp");
    let panel = simulate_dgp_panel(&cfg)?;
    let mut out = Artifacts::new(&common.out)?;
    write_panel(&panel, out.dir())?;
    panel_files(&mut out)?;
    out.finish("simulate-panel", seed, &cfg)
}

/// Read `--panel`, or simulate from the config's DGP section.
fn obtain_panel(arg: &PanelArg, dgp: &mut DgpConfig, seed: u64, out: &mut Artifacts) -> Result<SpatialPanel, CliError> {
    match &arg.panel {
        Some(dir) => {
            for f in ["panel.json", "outcomes.csv", "treatment.csv", "covariates.csv"] {
                out.input(&dir.join(f))?;
            }
            Ok(read_panel(dir)?)
        }
        None => {
            dgp.seed = derive_named(seed, "dgp");
            Ok(simulate_dgp_panel(dgp)?)
        }
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    /// CUSUM threshold.
    pub h: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self { h: 5.0 }
    }
}

/// Numeric rows of a CSV; a non-numeric first line is taken as a header.
fn read_numeric_csv(path: &Path, width: usize) -> Result<Vec<Vec<f64>>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Result<Vec<f64>, _> = line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        match fields {
            Ok(v) if v.len() == width => rows.push(v),
            Err(_) if no == 0 => continue,
            _ => {
                return Err(CliError::Runtime(format!(
                    "{}:{}: expected {width} numeric field(s)",
                    path.display(),
                    no + 1
                )))
            }
        }
    }
    Ok(rows)
}

pub fn detect(common: &Common, input: &Path, spatial: bool) -> Result<(), CliError> {
    let (cfg, seed) = setup::<DetectConfig>(common)?;
    let mut out = Artifacts::new(&common.out)?;
    out.input(input)?;
    #[derive(Serialize)]
    struct Output {
        mode: &'static str,
        /// 1-based index of the alarm in scan order.
        crossed_at: Option<usize>,
        /// Temporal: observations before the estimated change. Spatial:
        /// distance of the localised boundary.
        s_star: Option<f64>,
        /// Spatial only: distance at which the alarm fired.
        alarm_distance: Option<f64>,
        /// Spatial only: distance where the run-up to the alarm began.
        onset: Option<f64>,
        config: CusumConfig,
        trace: Vec<f64>,
        /// Spatial only: distances in scan order, aligned with `trace`.
        distances: Option<Vec<f64>>,
    }
    let result = if spatial {
        let pairs: Vec<(f64, f64)> = read_numeric_csv(input, 2)?.into_iter().map(|r| (r[0], r[1])).collect();
        let b = spatial_boundary_scan_auto(&pairs, cfg.h)?;
        Output {
            mode: "spatial",
            crossed_at: b.crossed_at,
            s_star: b.step,
            alarm_distance: b.s_star,
            onset: b.onset,
            config: b.config,
            trace: b.trace.iter().map(|p| p.1).collect(),
            distances: Some(b.trace.iter().map(|p| p.0).collect()),
        }
    } else {
        let series: Vec<f64> = read_numeric_csv(input, 1)?.into_iter().map(|r| r[0]).collect();
        let config = CusumConfig::estimate_from_stream(&series, cfg.h)?;
        let d = detect_with_trace(&series, &config);
        Output {
            mode: "temporal",
            crossed_at: d.crossed_at,
            s_star: d.last_reset.map(|r| r as f64),
            alarm_distance: None,
            onset: None,
            config,
            trace: d.trace,
            distances: None,
        }
    };
    out.write_json("detection.json", &result)?;
    out.finish("detect", seed, &cfg)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainDdpmConfig {
    pub dgp: DgpConfig,
    pub pipeline: PipelineConfig,
}

pub fn train_ddpm(common: &Common, panel_arg: &PanelArg) -> Result<(), CliError> {
    let (mut cfg, seed) = setup::<TrainDdpmConfig>(common)?;
    let mut out = Artifacts::new(&common.out)?;
    let panel = obtain_panel(panel_arg, &mut cfg.dgp, seed, &mut out)?;
    cfg.pipeline.seed = derive_named(seed, "pipeline");
    let run = pipeline::run(&panel, &cfg.pipeline)?;
    out.write("model.json", format!("{}\n", run.model.to_json()?).as_bytes())?;
    let mut log = String::from("epoch,loss\n");
    for (e, l) in run.model.training_log.epoch_loss.iter().enumerate() {
        writeln!(log, "{e},{l:?}").expect("string write");
    }
    out.write("training_log.csv", log.as_bytes())?;
    #[derive(Serialize)]
    struct Summary<'a> {
        trained: bool,
        loss_trend: Option<f64>,
        monitor_crossings: &'a [(usize, usize)],
        s_star_hat: Option<f64>,
        detection: Option<&'a pipeline::BoundaryDetection>,
    }
    out.write_json(
        "training.json",
        &Summary {
            trained: run.model.trained,
            loss_trend: run.model.training_log.loss_trend(),
            monitor_crossings: &run.model.training_log.crossings,
            s_star_hat: run.detection.as_ref().and_then(|d| d.s_star_hat),
            detection: run.detection.as_ref(),
        },
    )?;
    out.finish("train-ddpm", seed, &cfg)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateConfig {
    pub dgp: DgpConfig,
    pub pipeline: PipelineConfig,
    pub methods: Vec<Method>,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self { dgp: DgpConfig::default(), pipeline: PipelineConfig::default(), methods: Method::ALL.to_vec() }
    }
}

#[derive(Debug, Serialize)]
struct EstimateRow {
    method: Method,
    tau: f64,
    std_error: Option<f64>,
    ci_low: Option<f64>,
    ci_high: Option<f64>,
    rho_hat: Option<f64>,
    tau_pe: Option<f64>,
    tau_ge: Option<f64>,
    s_star: Option<f64>,
}

impl EstimateRow {
    fn baseline(method: Method, r: BaselineResult) -> Self {
        Self {
            method,
            tau: r.tau_hat,
            std_error: Some(r.std_error),
            ci_low: Some(r.ci_low),
            ci_high: Some(r.ci_high),
            rho_hat: r.rho_hat,
            tau_pe: None,
            tau_ge: None,
            s_star: None,
        }
    }
}

fn diffusion_config(pipeline: &PipelineConfig, method: Method, seed: u64) -> PipelineConfig {
    PipelineConfig {
        boundary_aware: method == Method::DdpmBoundary,
        seed: derive_named(seed, method.label()),
        ..pipeline.clone()
    }
}

pub fn estimate(common: &Common, panel_arg: &PanelArg) -> Result<(), CliError> {
    let (mut cfg, seed) = setup::<EstimateConfig>(common)?;
    let mut out = Artifacts::new(&common.out)?;
    let panel = obtain_panel(panel_arg, &mut cfg.dgp, seed, &mut out)?;
    let pipe_seed = derive_named(seed, "pipeline");
    let mut rows = Vec::new();
    for &m in &cfg.methods {
        progress(common, format!("estimate: {}", m.label()));
        let row = match m {
            Method::Ols => EstimateRow::baseline(m, baselines::ols(&panel)?),
            Method::Fe => EstimateRow::baseline(m, baselines::fixed_effects(&panel)?),
            Method::Sar => EstimateRow::baseline(m, baselines::sar_ml(&panel)?),
            Method::DdpmPe | Method::DdpmBoundary => {
                let p = pipeline::run(&panel, &diffusion_config(&cfg.pipeline, m, pipe_seed))?.point();
                EstimateRow {
                    method: m,
                    tau: p.tau,
                    std_error: None,
                    ci_low: None,
                    ci_high: None,
                    rho_hat: None,
                    tau_pe: p.tau_pe,
                    tau_ge: p.tau_ge,
                    s_star: p.s_star,
                }
            }
        };
        rows.push(row);
    }
    let mut csv = String::from("method,tau,std_error,ci_low,ci_high,rho_hat,tau_pe,tau_ge,s_star\n");
    for r in &rows {
        writeln!(
            csv,
            "{},{:?},{},{},{},{},{},{},{}",
            r.method.label(),
            r.tau,
            opt(r.std_error),
            opt(r.ci_low),
            opt(r.ci_high),
            opt(r.rho_hat),
            opt(r.tau_pe),
            opt(r.tau_ge),
            opt(r.s_star)
        )
        .expect("string write");
    }
    out.write("estimates.csv", csv.as_bytes())?;
    #[derive(Serialize)]
    struct Output<'a> {
        /// Regime-weighted true effect when the panel carries its DGP.
        truth: Option<f64>,
        estimates: &'a [EstimateRow],
    }
    out.write_json("estimates.json", &Output { truth: regime_weighted_truth(&panel).ok(), estimates: &rows })?;
    out.finish("estimate", seed, &cfg)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapFileConfig {
    pub dgp: DgpConfig,
    pub pipeline: PipelineConfig,
    pub bootstrap: BootstrapConfig,
}

pub fn bootstrap(common: &Common, panel_arg: &PanelArg) -> Result<(), CliError> {
    let (mut cfg, seed) = setup::<BootstrapFileConfig>(common)?;
    let mut out = Artifacts::new(&common.out)?;
    let panel = obtain_panel(panel_arg, &mut cfg.dgp, seed, &mut out)?;
    cfg.pipeline.seed = derive_named(seed, "pipeline");
    cfg.bootstrap.seed = derive_named(seed, "bootstrap");
    let (_, result) = ddpm_bootstrap(&panel, &cfg.pipeline, &cfg.bootstrap)?;
    write_bootstrap(&result, out.dir())?;
    out.adopt("bootstrap_draws.csv")?;
    out.adopt("bootstrap_summary.json")?;
    out.finish("bootstrap", seed, &cfg)
}

// ---------------------------------------------------------------------------

/// A single scenario at the top level, or a grid under `[[scenario]]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScenarioFile {
    Grid(ScenarioGrid),
    Single(ScenarioConfig),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioGrid {
    pub scenario: Vec<ScenarioConfig>,
}

impl Default for ScenarioFile {
    fn default() -> Self {
        ScenarioFile::Single(ScenarioConfig::default())
    }
}

impl ScenarioFile {
    fn into_vec(self) -> Vec<ScenarioConfig> {
        match self {
            ScenarioFile::Grid(g) => g.scenario,
            ScenarioFile::Single(s) => vec![s],
        }
    }
}

fn load_scenarios(common: &Common) -> Result<(Vec<ScenarioConfig>, u64), CliError> {
    // untagged enums hide the offending key, so parse the single form first
    // when there is no scenario array and report its error
    let text = match &common.config {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| CliError::Config {
            path: p.display().to_string(),
            message: e.to_string(),
            key: None,
            line: None,
            column: None,
        })?),
        None => None,
    };
    let (scenarios, manifest_seed) = match (&common.config, text) {
        (Some(p), Some(text)) => {
            let grid = crate::config::parse::<ScenarioGrid>(p, &text);
            match grid {
                Ok(l) => (l.config.scenario, l.manifest_seed),
                Err(grid_err) => match crate::config::parse::<ScenarioConfig>(p, &text) {
                    Ok(l) => (vec![l.config], l.manifest_seed),
                    Err(single_err) => {
                        let looks_like_grid = text.contains("[[scenario]]") || text.contains("\"scenario\"");
                        return Err(if looks_like_grid { grid_err } else { single_err });
                    }
                },
            }
        }
        _ => (ScenarioFile::default().into_vec(), None),
    };
    if scenarios.is_empty() {
        return Err(CliError::Usage("scenario file lists no scenarios".into()));
    }
    for s in &scenarios {
        if s.panel.contains([',', '\n', '\r']) {
            return Err(CliError::Usage(format!("panel label {:?} must not contain commas or newlines", s.panel)));
        }
    }
    Ok((scenarios, common.seed.or(manifest_seed).unwrap_or(DEFAULT_SEED)))
}

pub fn montecarlo(common: &Common, reps: Option<usize>) -> Result<(), CliError> {
    let (mut scenarios, seed) = load_scenarios(common)?;
    for s in &mut scenarios {
        s.seed = seed;
        if let Some(r) = reps {
            s.n_reps = r;
        }
        s.validate().map_err(invalid)?;
    }
    let mut out = Artifacts::new(&common.out)?;
    let mut reports: Vec<MetricsReport> = Vec::new();
    for (k, s) in scenarios.iter().enumerate() {
        progress(common, format!("montecarlo: scenario {} of {} (λ = {}, ρ = {})", k + 1, scenarios.len(), s.jump_intensity, s.spatial_rho));
        let run = run_scenario_with_records(s)?;
        out.write(&format!("records_{k:02}.csv"), &csv_bytes(|b| write_records_csv(&run.records, b))?)?;
        let mut report = run.report;
        report.wall_time = 0.0;
        reports.push(report);
    }
    out.write("summary.csv", &csv_bytes(|b| write_summary_csv(&reports, b))?)?;
    out.write("plot_lambda.csv", lambda_plot_data(&reports).as_bytes())?;
    out.finish("montecarlo", seed, &ScenarioFile::Grid(ScenarioGrid { scenario: scenarios }))
}

/// Bias and coverage against the jump intensity, one row per scenario and method.
pub fn lambda_plot_data(reports: &[MetricsReport]) -> String {
    let mut s = String::from("panel,spatial_rho,network,n,t,method,jump_intensity,bias,abs_bias,rmse,coverage\n");
    for r in reports {
        let c = &r.scenario;
        for m in &r.methods {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{:?},{:?},{:?},{:?}",
                c.panel,
                c.spatial_rho,
                c.network_kind.label(),
                c.n,
                c.t,
                m.method.label(),
                c.jump_intensity,
                m.bias,
                m.bias.abs(),
                m.rmse,
                m.coverage
            )
            .expect("string write");
        }
    }
    s
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlaceboConfig {
    pub dgp: DgpConfig,
    pub estimator: Method,
    pub n_permutations: usize,
    /// Used by the diffusion estimators.
    pub pipeline: PipelineConfig,
}

impl Default for PlaceboConfig {
    fn default() -> Self {
        Self { dgp: DgpConfig::default(), estimator: Method::Ols, n_permutations: 500, pipeline: PipelineConfig::default() }
    }
}

pub fn placebo(common: &Common, panel_arg: &PanelArg) -> Result<(), CliError> {
    let (mut cfg, seed) = setup::<PlaceboConfig>(common)?;
    let mut out = Artifacts::new(&common.out)?;
    let panel = obtain_panel(panel_arg, &mut cfg.dgp, seed, &mut out)?;
    let method = cfg.estimator;
    let pipeline = cfg.pipeline.clone();
    let estimator = move |p: &SpatialPanel, s: u64| -> stochbound::Result<f64> {
        match method {
            Method::Ols => Ok(baselines::ols(p)?.tau_hat),
            Method::Fe => Ok(baselines::fixed_effects(p)?.tau_hat),
            Method::Sar => Ok(baselines::sar_ml(p)?.tau_hat),
            Method::DdpmPe | Method::DdpmBoundary => ddpm_effect(p, &diffusion_config(&pipeline, method, s), s),
        }
    };
    let r = placebo_study(&panel, estimator, cfg.n_permutations, derive_named(seed, "placebo"))?;
    let mut csv = String::from("permutation,estimate\n");
    for (k, v) in r.placebo.iter().enumerate() {
        writeln!(csv, "{k},{v:?}").expect("string write");
    }
    out.write("placebo.csv", csv.as_bytes())?;
    #[derive(Serialize)]
    struct Summary {
        estimator: Method,
        true_estimate: f64,
        p_value: f64,
        central_90: (f64, f64),
        q99: f64,
        inside_central_90: bool,
        n_permutations: usize,
    }
    out.write_json(
        "placebo.json",
        &Summary {
            estimator: method,
            true_estimate: r.true_estimate,
            p_value: r.p_value,
            central_90: r.central_90,
            q99: r.q99,
            inside_central_90: r.inside_central_90(),
            n_permutations: r.placebo.len(),
        },
    )?;
    out.finish("placebo", seed, &cfg)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivityConfig {
    pub scenario: ScenarioConfig,
    pub h_grid: Vec<f64>,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig { n_reps: 100, methods: vec![Method::DdpmBoundary], ..Default::default() },
            h_grid: vec![1.0, 3.0, 5.0, 7.0, 10.0],
        }
    }
}

pub const SENSITIVITY_HEADER: &str = "h,coverage,detection_power,type_i_rate,n_reps";

pub fn sensitivity(common: &Common, reps: Option<usize>) -> Result<(), CliError> {
    let (mut cfg, seed) = setup::<SensitivityConfig>(common)?;
    cfg.scenario.seed = seed;
    if let Some(r) = reps {
        cfg.scenario.n_reps = r;
    }
    let points = threshold_sensitivity(&cfg.scenario, &cfg.h_grid)?;
    let mut csv = format!("{SENSITIVITY_HEADER}\n");
    for p in &points {
        writeln!(csv, "{:?},{:?},{:?},{:?},{}", p.h, p.coverage, p.detection_power, p.type_i_rate, p.n_reps).expect("string write");
    }
    let mut out = Artifacts::new(&common.out)?;
    out.write("sensitivity.csv", csv.as_bytes())?;
    out.finish("sensitivity", seed, &cfg)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub selector: Selector,
    /// Overrides the budget in the inputs file.
    pub budget: Option<usize>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { selector: Selector::Auto, budget: None }
    }
}

pub fn policy(common: &Common, input: &Path) -> Result<(), CliError> {
    let (cfg, seed) = setup::<PolicyConfig>(common)?;
    let mut out = Artifacts::new(&common.out)?;
    out.input(input)?;
    let text = std::fs::read_to_string(input)?;
    let mut inputs: PolicyInputs = serde_json::from_str(&text).map_err(|e| CliError::Config {
        path: input.display().to_string(),
        key: crate::config::named_key(&e.to_string()),
        message: e.to_string(),
        line: Some(e.line()),
        column: Some(e.column()),
    })?;
    if let Some(b) = cfg.budget {
        inputs.budget = b;
    }
    let result = select_targets(&inputs, cfg.selector)?;
    let comparison = compare_pe_vs_ge_targeting(&inputs, inputs.budget, cfg.selector)?;
    #[derive(Serialize)]
    struct Output<'a> {
        selector: Selector,
        budget: usize,
        result: &'a stochbound::policy::PolicyResult,
        comparison: &'a stochbound::policy::TargetingComparison,
    }
    out.write_json("policy.json", &Output { selector: cfg.selector, budget: inputs.budget, result: &result, comparison: &comparison })?;
    out.finish("policy", seed, &cfg)
}
