use nalgebra::{DMatrix, DVector};
use stochbound::baselines::*;
use stochbound::linalg::{log_det_from_eigen, ols as ls};
use stochbound::rng::{derive_seed, seeded};
use stochbound::spatial_dgp::{generate_network, simulate_panel, DgpConfig, NetworkKind};
use stochbound::stochastic_process::JumpDiffusionParams;

fn single_regime(rho: f64, noise_sd: f64, seed: u64) -> DgpConfig {
    DgpConfig {
        rho_pe: rho,
        rho_ge: rho,
        delta_ge: 0.0,
        noise_sd,
        spillover_params: JumpDiffusionParams { jump_intensity_lambda0: 0.0, ..Default::default() },
        seed,
        ..Default::default()
    }
}

#[test]
fn ols_residuals_are_orthogonal_to_the_design() {
    let mut rng = seeded(1);
    use rand::Rng;
    let x = DMatrix::from_fn(200, 4, |_, j| if j == 0 { 1.0 } else { rng.random_range(-2.0..2.0) });
    let y = DVector::from_fn(200, |i, _| x.row(i).sum() + rng.random_range(-1.0..1.0));
    let fit = ls(&x, &y).unwrap();
    let xe = x.transpose() * &fit.residuals;
    assert!(xe.norm() <= 1e-8 * (x.norm() * y.norm()));
}

#[test]
fn ols_and_fe_intervals_are_calibrated_without_spillovers() {
    let reps = 200;
    let mut cover = [0usize; 2];
    for k in 0..reps {
        let cfg = single_regime(0.0, 0.1, derive_seed(2, k));
        let p = simulate_panel(&cfg).unwrap();
        cover[0] += usize::from(ols(&p).unwrap().covers(cfg.tau_pe));
        cover[1] += usize::from(fixed_effects(&p).unwrap().covers(cfg.tau_pe));
    }
    for (name, c) in ["ols", "fe"].iter().zip(cover) {
        let rate = c as f64 / reps as f64;
        assert!((0.90..=0.98).contains(&rate), "{name} coverage {rate}");
    }
}

#[test]
fn within_location_fe_absorbs_location_shifts() {
    let cfg = single_regime(0.0, 0.1, 3);
    let mut p = simulate_panel(&cfg).unwrap();
    // treatment switches on halfway for every other location
    for i in 0..p.n {
        for t in 0..p.t {
            p.treatment[(i, t)] = if i % 2 == 0 && t >= p.t / 2 { 1.0 } else { 0.0 };
        }
    }
    let base = fixed_effects(&p).unwrap();
    assert_eq!(base.transform.as_deref(), Some("location"));
    let mut shifted = p.clone();
    for i in (0..p.n).filter(|i| i % 3 == 0) {
        for t in 0..p.t {
            shifted.outcomes[(i, t)] += 10.0;
        }
    }
    assert!((fixed_effects(&shifted).unwrap().tau_hat - base.tau_hat).abs() < 1e-8);
}

#[test]
fn sar_recovers_its_own_parameters() {
    let cfg = DgpConfig { beta: vec![0.0, 0.0], alpha_sd: 0.0, ..single_regime(0.3, 0.05, 4) };
    let r = sar_ml(&simulate_panel(&cfg).unwrap()).unwrap();
    assert!((r.rho_hat.unwrap() - 0.3).abs() <= 0.02, "{r:?}");
    assert!((r.tau_hat - cfg.tau_pe).abs() <= 0.02, "{r:?}");
}

#[test]
fn sar_finds_no_spillover_when_there_is_none() {
    let r = sar_ml(&simulate_panel(&single_regime(0.0, 0.25, 5)).unwrap()).unwrap();
    assert!(r.rho_hat.unwrap().abs() <= 0.05, "{r:?}");
}

#[test]
fn eigenvalue_log_determinant_matches_the_direct_one() {
    for kind in [NetworkKind::Sparse, NetworkKind::Dense] {
        let net = generate_network(60, kind, 6).unwrap();
        let eig = net.eigenvalues();
        for rho in [-0.5, 0.2, 0.7] {
            let direct = (DMatrix::identity(60, 60) - &net.weights * rho).determinant().ln();
            assert!((log_det_from_eigen(&eig, rho) - direct).abs() < 1e-8);
        }
    }
}

#[test]
fn estimators_are_deterministic() {
    let p = simulate_panel(&DgpConfig { seed: 7, ..Default::default() }).unwrap();
    assert_eq!(ols(&p).unwrap(), ols(&p).unwrap());
    assert_eq!(fixed_effects(&p).unwrap(), fixed_effects(&p).unwrap());
    assert_eq!(sar_ml(&p).unwrap(), sar_ml(&p).unwrap());
}

#[test]
fn within_lr_ignores_location_shifts() {
    let p = simulate_panel(&single_regime(0.2, 0.25, 8)).unwrap();
    let eig = p.network.eigenvalues();
    let base = sar_within_lr(&p, &p.network.weights, &eig).unwrap();
    let mut shifted = p.clone();
    for i in 0..p.n {
        for t in 0..p.t {
            shifted.outcomes[(i, t)] += 3.0 * (i % 5) as f64;
        }
    }
    let moved = sar_within_lr(&shifted, &p.network.weights, &eig).unwrap();
    assert!((base - moved).abs() <= 1e-8 * base.abs().max(1.0), "{base} vs {moved}");
    assert!(base > 3.84);
}
