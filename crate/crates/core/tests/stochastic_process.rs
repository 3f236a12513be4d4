use proptest::prelude::*;
use stochbound::stochastic_process::*;

fn base() -> JumpDiffusionParams {
    JumpDiffusionParams {
        s0: 0.0,
        drift_mu: 0.0,
        drift_slope: 0.0,
        sigma: 0.0,
        jump_intensity_lambda0: 0.0,
        jump_size_dist: JumpSizeDist::Exponential { mean: 1.0 },
        state_dep_exponent: 0.0,
        jump_scaling: JumpScaling::Additive,
        compensated: false,
    }
}

fn inverse_gaussian_cdf(t: f64, a: f64, m: f64, sigma: f64) -> f64 {
    // P(first passage of m·t + σW_t through a ≤ t), written out directly
    let phi = |x: f64| 0.5 * erfc(-x / std::f64::consts::SQRT_2);
    let sd = sigma * t.sqrt();
    phi((m * t - a) / sd) + (2.0 * m * a / (sigma * sigma)).exp() * phi((-a - m * t) / sd)
}

/// Complementary error function via the Numerical Recipes Chebyshev fit
/// (relative error below 1.2e−7), independent of the crate's normal CDF.
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let poly = -z * z - 1.26551223
        + t * (1.00002368
            + t * (0.37409196
                + t * (0.09678418
                    + t * (-0.18628806
                        + t * (0.27886807 + t * (-1.13520398 + t * (1.48851587 + t * (-0.82215223 + t * 0.17087277))))))));
    let r = t * poly.exp();
    if x >= 0.0 { r } else { 2.0 - r }
}

#[test]
fn brownian_moments_at_unit_time() {
    let p = JumpDiffusionParams { sigma: 1.0, ..base() };
    let ends: Vec<f64> = (0..10_000u64)
        .map(|i| *simulate_path_indexed(&p, 1.0, 0.01, 1, i).unwrap().values.last().unwrap())
        .collect();
    let n = ends.len() as f64;
    let m = ends.iter().sum::<f64>() / n;
    let v = ends.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    assert!(m.abs() <= 3.0 / n.sqrt(), "mean {m}");
    assert!((v - 1.0).abs() <= 0.05, "variance {v}");
}

#[test]
fn jump_counts_follow_the_intensity() {
    let p = JumpDiffusionParams { jump_intensity_lambda0: 0.5, ..base() };
    let counts: Vec<f64> = (0..10_000u64)
        .map(|i| simulate_path_indexed(&p, 2.0, 0.01, 2, i).unwrap().jump_times.len() as f64)
        .collect();
    let n = counts.len() as f64;
    let m = counts.iter().sum::<f64>() / n;
    let se = (counts.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt();
    assert!((m - 1.0).abs() <= 3.0 * se, "mean count {m}, s.e. {se}");
}

#[test]
fn passage_times_follow_the_inverse_gaussian_law() {
    let p = JumpDiffusionParams { drift_mu: 0.2, sigma: 0.3, ..base() };
    let b = BoundarySpec::new(1.0).unwrap();
    let mut hits: Vec<f64> = passage_times_mc(&p, &b, 5.0, 0.001, 10_000, 3).unwrap().into_iter().flatten().collect();
    hits.sort_by(f64::total_cmp);
    let n = 10_000.0;
    // Kolmogorov distance on [0, 5], censored paths sit above the horizon
    let mut ks: f64 = 0.0;
    for (k, &t) in hits.iter().enumerate() {
        let f = inverse_gaussian_cdf(t, 1.0, 0.2, 0.3);
        ks = ks.max((k as f64 / n - f).abs()).max(((k + 1) as f64 / n - f).abs());
    }
    ks = ks.max((hits.len() as f64 / n - inverse_gaussian_cdf(5.0, 1.0, 0.2, 0.3)).abs());
    assert!(ks <= 0.02, "Kolmogorov distance {ks}");
}

#[test]
fn closed_form_matches_the_direct_inverse_gaussian() {
    for (s0, m, sigma, t) in [(0.0, 0.2, 0.3, 5.0), (0.3, -0.1, 0.5, 2.0), (-1.0, 0.5, 1.0, 0.7)] {
        let got = drifted_brownian_crossing_probability(s0, 1.0, m, sigma, t);
        let want = inverse_gaussian_cdf(t, 1.0 - s0, m, sigma);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn decomposition_matches_monte_carlo_for_rare_jumps() {
    let b = BoundarySpec::new(1.0).unwrap();
    for lambda in [0.01, 0.02, 0.04] {
        let p = JumpDiffusionParams { drift_mu: 0.1, sigma: 0.3, jump_intensity_lambda0: lambda, ..base() };
        let mc = crossing_probability_mc(&p, &b, 5.0, 10_000, 4).unwrap();
        let d = crossing_probability_decomposed(&p, &b, 5.0).unwrap();
        assert!((d - mc.probability).abs() <= 3.0 * mc.std_error + 0.05, "λ = {lambda}: {d} vs {}", mc.probability);
    }
}

#[test]
fn decomposition_is_exact_when_every_jump_crosses() {
    let b = BoundarySpec::new(1.0).unwrap();
    for lambda in [0.02, 0.04] {
        let p = JumpDiffusionParams { s0: 0.5, jump_intensity_lambda0: lambda, jump_size_dist: JumpSizeDist::Fixed { size: 0.6 }, ..base() };
        let mc = crossing_probability_mc(&p, &b, 5.0, 10_000, 5).unwrap();
        let d = crossing_probability_decomposed(&p, &b, 5.0).unwrap();
        assert!((d - mc.probability).abs() <= 3.0 * mc.std_error, "λ = {lambda}: {d} vs {}", mc.probability);
    }
}

#[test]
fn jump_intensity_can_be_calibrated_to_the_reference_crossing_probability() {
    let p = JumpDiffusionParams::default();
    let b = BoundarySpec::new(1.0).unwrap();
    let cal = calibrate_jump_intensity(&p, &b, 5.0, 0.73, 4000, 6, (0.0, 5.0), 0.01).unwrap();
    assert!((cal.probability - 0.73).abs() <= 0.02, "{cal:?}");
}

#[test]
fn halving_the_step_keeps_crossing_probabilities() {
    let p = JumpDiffusionParams::default();
    let b = BoundarySpec::new(1.0).unwrap();
    let coarse = crossing_probability_mc_with_dt(&p, &b, 5.0, 0.01, 10_000, 7).unwrap();
    let fine = crossing_probability_mc_with_dt(&p, &b, 5.0, 0.005, 10_000, 8).unwrap();
    let se = (coarse.std_error.powi(2) + fine.std_error.powi(2)).sqrt();
    assert!((coarse.probability - fine.probability).abs() < 3.0 * se);
    let drift = JumpDiffusionParams { s0: 0.5, drift_mu: 0.1, ..base() };
    let a = simulate_path(&drift, 2.0, 0.01, 0).unwrap();
    let h = simulate_path(&drift, 2.0, 0.005, 0).unwrap();
    for (k, v) in a.values.iter().enumerate() {
        assert!((v - h.values[2 * k]).abs() < 1e-12);
    }
}

#[test]
fn crossing_probability_grows_with_horizon_and_intensity() {
    let b = BoundarySpec::new(1.0).unwrap();
    let mut prev = 0.0;
    for lambda in [0.0, 0.1, 0.5, 1.0] {
        let p = JumpDiffusionParams { jump_intensity_lambda0: lambda, ..JumpDiffusionParams::default() };
        let pr = crossing_probability_mc(&p, &b, 5.0, 2000, 9).unwrap().probability;
        assert!(pr >= prev, "λ = {lambda}: {pr} < {prev}");
        prev = pr;
    }
    let p = JumpDiffusionParams::default();
    let mut prev = 0.0;
    for horizon in [1.0, 2.0, 5.0, 10.0] {
        let pr = crossing_probability_mc(&p, &b, horizon, 2000, 10).unwrap().probability;
        assert!(pr >= prev, "T = {horizon}: {pr} < {prev}");
        prev = pr;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn paths_are_reproducible(seed in any::<u64>(), lambda in 0.0f64..3.0) {
        let p = JumpDiffusionParams { jump_intensity_lambda0: lambda, ..JumpDiffusionParams::default() };
        prop_assert_eq!(simulate_path(&p, 2.0, 0.01, seed).unwrap(), simulate_path(&p, 2.0, 0.01, seed).unwrap());
    }

    #[test]
    fn without_jumps_the_jump_law_is_irrelevant(seed in any::<u64>(), size in 0.1f64..2.0) {
        let a = JumpDiffusionParams { sigma: 0.4, drift_mu: 0.1, ..base() };
        let b = JumpDiffusionParams { jump_size_dist: JumpSizeDist::Fixed { size }, ..a.clone() };
        prop_assert_eq!(simulate_path(&a, 1.0, 0.01, seed).unwrap().values, simulate_path(&b, 1.0, 0.01, seed).unwrap().values);
    }

    #[test]
    fn jump_times_lie_on_the_grid(seed in any::<u64>()) {
        let p = JumpDiffusionParams { jump_intensity_lambda0: 2.0, ..JumpDiffusionParams::default() };
        let path = simulate_path(&p, 3.0, 0.01, seed).unwrap();
        prop_assert_eq!(path.times.len(), path.values.len());
        prop_assert!(path.jump_times.iter().all(|t| path.times.contains(t)));
        prop_assert!(path.jump_sizes.iter().all(|&s| s > 0.0));
    }
}
