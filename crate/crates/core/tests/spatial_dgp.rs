use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use stochbound::baselines;
use stochbound::rng::derive_seed;
use stochbound::spatial_dgp::*;

fn check_row_stochastic(w: &DMatrix<f64>) {
    for i in 0..w.nrows() {
        assert!((w.row(i).sum() - 1.0).abs() <= 1e-10, "row {i}");
        assert_eq!(w[(i, i)], 0.0);
        assert!(w.row(i).iter().all(|&x| x >= 0.0));
    }
}

#[test]
fn scaling_distances_and_decay_together_leaves_weights_unchanged() {
    let coords: [[f64; 2]; 4] = [[0.0, 0.0], [3.0, 1.0], [7.0, 4.0], [2.0, 9.0]];
    let geo = DMatrix::from_fn(4, 4, |i, j| {
        let (a, b) = (coords[i], coords[j]);
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    });
    let zero = DMatrix::zeros(4, 4);
    let w = build_weights_from_distances(&geo, &zero, &WeightsParams { theta_d: 0.5, theta_e: 0.0 }).unwrap();
    // a power of two keeps both products exact
    let c = 4.0;
    let w2 = build_weights_from_distances(&(&geo * c), &zero, &WeightsParams { theta_d: 0.5 / c, theta_e: 0.0 }).unwrap();
    assert_eq!(w, w2);
}

#[test]
fn kernel_networks_are_dense_and_normalised() {
    let net = generate_network(40, NetworkKind::Kernel { theta_d: 0.05, theta_e: 0.0 }, 1).unwrap();
    check_row_stochastic(&net.weights);
    assert!(net.weights.iter().enumerate().filter(|(k, _)| k % 41 != 0).all(|(_, &x)| x > 0.0));
}

#[test]
fn networks_are_reproducible() {
    for kind in [NetworkKind::Sparse, NetworkKind::Dense] {
        assert_eq!(generate_network(50, kind, 2).unwrap(), generate_network(50, kind, 2).unwrap());
    }
    let net = generate_network(50, NetworkKind::Sparse, 3).unwrap();
    assert!((3.5..=5.5).contains(&net.binary_degree()));
}

#[test]
fn one_point_grid_returns_that_point() {
    let panel = simulate_panel(&DgpConfig { seed: 4, ..Default::default() }).unwrap();
    let only = WeightsParams { theta_d: 0.3, theta_e: 0.2 };
    assert_eq!(estimate_weight_params(&panel, &[only]).unwrap(), only);
}

#[test]
fn kernel_parameters_are_recovered_from_their_own_data() {
    let truth = WeightsParams { theta_d: 0.05, theta_e: 0.1 };
    let grid: Vec<WeightsParams> = [0.02, 0.05, 0.1]
        .iter()
        .flat_map(|&d| [0.0, 0.1, 0.3].map(|e| WeightsParams { theta_d: d, theta_e: e }))
        .collect();
    let reps = 100;
    let hits = (0..reps)
        .filter(|&k| {
            let cfg = DgpConfig {
                network_kind: NetworkKind::Kernel { theta_d: truth.theta_d, theta_e: truth.theta_e },
                econ_distance: EconDistance::RandomLine,
                rho_pe: 0.5,
                rho_ge: 0.5,
                seed: derive_seed(5, k),
                ..Default::default()
            };
            let p = simulate_panel(&cfg).unwrap();
            estimate_weight_params(&p, &grid).unwrap() == truth
        })
        .count();
    assert!(hits as f64 >= 0.8 * reps as f64, "{hits} of {reps}");
}

#[test]
fn without_spillovers_the_first_grid_point_is_returned() {
    let cfg = DgpConfig { rho_pe: 0.0, rho_ge: 0.0, delta_ge: 0.0, seed: 6, ..Default::default() };
    let p = simulate_panel(&cfg).unwrap();
    let grid = [WeightsParams { theta_d: 0.1, theta_e: 0.0 }, WeightsParams { theta_d: 0.01, theta_e: 0.0 }];
    assert_eq!(estimate_weight_params(&p, &grid).unwrap(), grid[1]);
}

#[test]
fn simultaneous_outcomes_equal_the_neumann_series() {
    let cfg = DgpConfig {
        n_locations: 30,
        noise_sd: 0.0,
        alpha_sd: 0.0,
        beta: vec![0.0, 0.0],
        rho_pe: 0.3,
        rho_ge: 0.3,
        delta_ge: 0.0,
        treated_fraction: 1.0 / 30.0,
        seed: 7,
        ..Default::default()
    };
    let p = simulate_panel(&cfg).unwrap();
    let w = &p.network.weights;
    let d = DVector::from_iterator(p.n, p.treatment.column(0).iter().copied());
    assert_eq!(d.sum(), 1.0);
    let mut term = d * cfg.tau_pe;
    let mut series = term.clone();
    for _ in 1..50 {
        term = w * &term * 0.3;
        series += &term;
    }
    for i in 0..p.n {
        assert!((p.outcomes[(i, 0)] - series[i]).abs() < 1e-8);
    }
}

#[test]
fn regimes_mix_in_most_default_panels() {
    let mixed = (0..100)
        .filter(|&k| {
            let p = simulate_panel(&DgpConfig { seed: derive_seed(8, k), ..Default::default() }).unwrap();
            let f = p.true_ge_fraction().unwrap();
            f > 0.0 && f < 1.0
        })
        .count();
    assert!(mixed >= 90, "{mixed} of 100");
}

#[test]
fn effect_series_switches_with_the_regime() {
    let cfg = DgpConfig { seed: 9, ..Default::default() };
    let p = simulate_panel(&cfg).unwrap();
    let states = p.period_state.as_ref().unwrap();
    let regimes = p.true_regime.as_ref().unwrap();
    let taus = p.true_tau_series.as_ref().unwrap();
    for t in 0..p.t {
        let ge = states[t] >= cfg.s_star;
        assert_eq!(regimes[t] == Regime::Ge, ge);
        assert_eq!(taus[t], if ge { cfg.tau_pe + cfg.delta_ge } else { cfg.tau_pe });
    }
}

#[test]
fn single_regime_panel_gives_unbiased_ols() {
    let cfg = DgpConfig { delta_ge: 0.0, rho_pe: 0.0, rho_ge: 0.0, seed: 10, ..Default::default() };
    let p = simulate_panel(&cfg).unwrap();
    let r = baselines::ols(&p).unwrap();
    assert!((r.tau_hat - cfg.tau_pe).abs() <= 3.0 * r.std_error, "{} ± {}", r.tau_hat, r.std_error);
}

#[test]
fn panels_do_not_depend_on_the_thread_count() {
    let cfg = DgpConfig { seed: 11, ..Default::default() };
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| simulate_panel(&cfg).unwrap());
    let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap().install(|| simulate_panel(&cfg).unwrap());
    assert_eq!(one.outcomes, three.outcomes);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_weights_are_row_stochastic(n in 5usize..60, seed in any::<u64>(), dense in any::<bool>()) {
        let kind = if dense { NetworkKind::Dense } else { NetworkKind::Sparse };
        check_row_stochastic(&generate_network(n, kind, seed).unwrap().weights);
    }

    #[test]
    fn spillover_operator_is_contractive(seed in any::<u64>(), rho in -0.99f64..0.99) {
        let net = generate_network(40, NetworkKind::Sparse, seed).unwrap();
        let radius = net.eigenvalues().iter().map(|&(re, im)| (re * re + im * im).sqrt()).fold(0.0, f64::max);
        prop_assert!((rho * radius).abs() < 1.0);
    }
}
