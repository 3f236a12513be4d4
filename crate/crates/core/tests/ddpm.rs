use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use stochbound::ddpm::*;
use stochbound::pipeline::{self, PipelineConfig};
use stochbound::rng::seeded;
use stochbound::spatial_dgp::{simulate_panel, DgpConfig};
use stochbound::stochastic_process::JumpDiffusionParams;

fn tiny_model(seed: u64) -> DdpmModel {
    let cfg = TrainConfig { hidden: vec![2], n_steps: 50, seed, ..TrainConfig::default() };
    let mut m = DdpmModel::new(1, &cfg).unwrap();
    let mut rng = seeded(seed);
    m.denoiser.params.iter_mut().for_each(|p| *p = rng.random_range(-1.0..1.0));
    m.mean_head.iter_mut().for_each(|p| *p = rng.random_range(-0.5..0.5));
    m.scaling.data_var = 0.7;
    m
}

fn random_rows(n: usize, seed: u64) -> Vec<TrainingRow> {
    let mut rng = seeded(seed);
    (0..n)
        .map(|i| TrainingRow {
            x0: rng.random_range(-1.0..1.0),
            cond: Conditioning {
                d: (i % 2) as f64,
                z: vec![rng.random_range(-1.0..1.0)],
                s_hat: rng.random_range(0.0..2.0),
            },
        })
        .collect()
}

fn set_param(m: &mut DdpmModel, k: usize, v: f64) {
    let n_net = m.denoiser.params.len();
    if k < n_net {
        m.denoiser.params[k] = v;
    } else {
        m.mean_head[k - n_net] = v;
    }
}

fn get_param(m: &DdpmModel, k: usize) -> f64 {
    let n_net = m.denoiser.params.len();
    if k < n_net { m.denoiser.params[k] } else { m.mean_head[k - n_net] }
}

#[test]
fn analytic_gradient_matches_central_differences() {
    let model = tiny_model(11);
    let rows = random_rows(5, 12);
    let mut rng = seeded(13);
    let batch: Vec<NoisedExample> = rows
        .iter()
        .map(|row| NoisedExample { row, t: rng.random_range(1..=50), noise: StandardNormal.sample(&mut rng) })
        .collect();
    let mut grad = vec![0.0; model.n_trainable()];
    denoising_loss(&model, &batch, Some(&mut grad));
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for k in 0..model.n_trainable() {
        let mut m = model.clone();
        let p0 = get_param(&model, k);
        set_param(&mut m, k, p0 + h);
        let up = denoising_loss(&m, &batch, None);
        set_param(&mut m, k, p0 - h);
        let down = denoising_loss(&m, &batch, None);
        let fd = (up - down) / (2.0 * h);
        let rel = (grad[k] - fd).abs() / grad[k].abs().max(fd.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-4, "worst relative gradient error {worst:e}");
}

#[test]
fn forward_marginal_variance_is_one_minus_alpha_bar() {
    let s = NoiseSchedule::default_for(1000).unwrap();
    let mut rng = seeded(21);
    for t in [1, 10, 100, 500, 1000] {
        let draws: Vec<f64> = (0..20_000)
            .map(|_| forward_sample(0.7, t, &s, StandardNormal.sample(&mut rng)).unwrap().0)
            .collect();
        let m = draws.iter().sum::<f64>() / draws.len() as f64;
        let v = draws.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        let want = 1.0 - s.alpha_bar(t);
        assert!((v / want - 1.0).abs() < 0.05, "t = {t}: variance {v} vs {want}");
    }
}

fn constant_rows(n: usize, value: f64) -> Vec<TrainingRow> {
    (0..n)
        .map(|i| TrainingRow { x0: value, cond: Conditioning { d: (i % 2) as f64, z: vec![], s_hat: 0.5 } })
        .collect()
}

#[test]
fn point_mass_is_recovered_by_reverse_sampling() {
    let cfg = TrainConfig { hidden: vec![8, 8], epochs: 20, lr: 2e-3, n_steps: 200, sample_steps: None, seed: 3, ..TrainConfig::default() };
    let mut m = DdpmModel::new(0, &cfg).unwrap();
    train_on(&mut m, &constant_rows(256, 5.0), &cfg).unwrap();
    let draws = sample_counterfactual(&m, 1.0, &[], 0.5, 500, 9).unwrap();
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let se = (draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt();
    assert!((mean - 5.0).abs() <= 5.0 * se, "mean {mean}, s.e. {se}");
}

#[test]
fn training_on_a_constant_drives_held_out_loss_down() {
    let cfg = TrainConfig { hidden: vec![8, 8], epochs: 20, lr: 2e-3, n_steps: 200, sample_steps: None, seed: 4, ..TrainConfig::default() };
    let train_rows = constant_rows(256, 2.0);
    let held_out = constant_rows(256, 2.0);
    let mut rng = seeded(5);
    let batch: Vec<NoisedExample> = held_out
        .iter()
        .map(|row| NoisedExample { row, t: rng.random_range(1..=200), noise: StandardNormal.sample(&mut rng) })
        .collect();
    let mut m = DdpmModel::new(0, &cfg).unwrap();
    let before = denoising_loss(&m, &batch, None);
    train_on(&mut m, &train_rows, &cfg).unwrap();
    let after = denoising_loss(&m, &batch, None);
    assert!(after < 0.1 * before, "loss {before} -> {after}");
}

fn noiseless_dgp(seed: u64) -> DgpConfig {
    DgpConfig {
        noise_sd: 0.0,
        alpha_sd: 0.0,
        rho_ge: 0.0,
        spillover_params: JumpDiffusionParams { drift_mu: 0.25, jump_intensity_lambda0: 0.0, ..Default::default() },
        seed,
        ..Default::default()
    }
}

#[test]
fn noiseless_panel_recovers_both_regime_effects() {
    let dgp = noiseless_dgp(5);
    let panel = simulate_panel(&dgp).unwrap();
    let out = pipeline::run(&panel, &PipelineConfig { m_samples: 4, ..Default::default() }).unwrap();
    let pe = out.effects.tau_pe.expect("PE periods present");
    let ge = out.effects.tau_ge.expect("GE periods present");
    assert!((pe - dgp.tau_pe).abs() <= 0.05, "tau_pe {pe}");
    assert!((ge - (dgp.tau_pe + dgp.delta_ge)).abs() <= 0.05, "tau_ge {ge}");
}

#[test]
fn training_and_estimation_are_deterministic() {
    let panel = simulate_panel(&DgpConfig { seed: 8, ..Default::default() }).unwrap();
    let cfg = PipelineConfig { seed: 17, ..Default::default() };
    let a = pipeline::run(&panel, &cfg).unwrap();
    let b = pipeline::run(&panel, &cfg).unwrap();
    assert_eq!(a.model.to_json().unwrap(), b.model.to_json().unwrap());
    assert_eq!(a.effects, b.effects);
}
