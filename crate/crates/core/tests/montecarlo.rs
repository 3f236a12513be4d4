use stochbound::baselines;
use stochbound::montecarlo::*;
use stochbound::rng::derive_seed;
use stochbound::spatial_dgp::{simulate_panel, DgpConfig, SpatialPanel};

fn ols_scenario(n_reps: usize, seed: u64) -> ScenarioConfig {
    ScenarioConfig { methods: vec![Method::Ols, Method::Fe, Method::Sar], n_reps, seed, ..Default::default() }
}

fn ols_tau(p: &SpatialPanel, _seed: u64) -> stochbound::Result<f64> {
    Ok(baselines::ols(p)?.tau_hat)
}

#[test]
fn different_seeds_agree_within_monte_carlo_error() {
    let a = run_scenario(&ols_scenario(100, 1)).unwrap();
    let b = run_scenario(&ols_scenario(100, 2)).unwrap();
    for (x, y) in a.methods.iter().zip(&b.methods) {
        assert_eq!(x.method, y.method);
        let se = (x.bias_se.powi(2) + y.bias_se.powi(2)).sqrt();
        assert!((x.bias - y.bias).abs() < 3.0 * se, "{:?}: {} vs {} (se {se})", x.method, x.bias, y.bias);
    }
}

#[test]
fn rmse_never_falls_below_absolute_bias() {
    let r = run_scenario(&ols_scenario(30, 3)).unwrap();
    for m in &r.methods {
        assert!(m.rmse * m.rmse >= m.bias * m.bias - 1e-15, "{:?}", m.method);
    }
}

#[test]
fn thread_count_does_not_change_the_numbers() {
    let cfg = ols_scenario(12, 4);
    let run_with = |threads: usize| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| {
            let mut r = run_scenario_with_records(&cfg).unwrap();
            r.report.wall_time = 0.0;
            r
        })
    };
    let (one, three) = (run_with(1), run_with(3));
    assert_eq!(one.records, three.records);
    assert_eq!(one.report, three.report);
}

#[test]
fn placebo_distribution_is_centred_under_the_null() {
    let panel = simulate_panel(&DgpConfig { tau_pe: 0.0, delta_ge: 0.0, seed: 5, ..Default::default() }).unwrap();
    let r = placebo_study(&panel, ols_tau, 400, 6).unwrap();
    let n = r.placebo.len() as f64;
    let m = r.placebo.iter().sum::<f64>() / n;
    let se = (r.placebo.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt();
    assert!(m.abs() <= 3.0 * se, "placebo mean {m}, s.e. {se}");
}

#[test]
fn placebo_separates_a_real_effect() {
    let panel = simulate_panel(&DgpConfig { seed: 7, ..Default::default() }).unwrap();
    let r = placebo_study(&panel, ols_tau, 500, 8).unwrap();
    assert!(r.p_value <= 0.01, "p = {}", r.p_value);
    assert!(r.true_estimate > r.q99);
}

#[test]
fn null_estimates_mostly_sit_inside_the_placebo_band() {
    let reps = 100;
    let inside = (0..reps)
        .filter(|&k| {
            let dgp = DgpConfig { tau_pe: 0.0, delta_ge: 0.0, seed: derive_seed(9, k), ..Default::default() };
            let p = simulate_panel(&dgp).unwrap();
            placebo_study(&p, ols_tau, 200, derive_seed(10, k)).unwrap().inside_central_90()
        })
        .count();
    assert!(inside as f64 >= 0.85 * reps as f64, "{inside} of {reps}");
}

#[test]
fn boundary_study_is_reproducible() {
    let cfg = BoundaryStudyConfig { n_reps: 20, seed: 11, ..Default::default() };
    let a = boundary_accuracy_study(&cfg).unwrap();
    let b = boundary_accuracy_study(&cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.records.len(), 20);
    assert!(a.records.iter().all(|r| (25.0..=40.0).contains(&r.radius)));
}
