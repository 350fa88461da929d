mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saic_core::autodiff::Graph;
use saic_core::dataset::Example;
use saic_core::losses::{
    draw_noise, perceptual_loss, stage1_loss, stage2_loss, OptimizerKind, PenaltyTarget, PerceptualConfig,
    PerceptualNet, Stage1Config, Stage2Config,
};
use saic_core::model::{init_networks, instance_norm, NORM_EPS};
use saic_core::training::{init_latent_tables, OptimizerState};
use saic_core::{Parameters, Tensor};

use common::{random_examples, random_tensor, tiny_model};

fn perceptual() -> PerceptualNet {
    PerceptualNet::new(tiny_model().mel_bins, &PerceptualConfig::default()).unwrap()
}

#[test]
fn networks_stay_finite_over_random_draws() {
    let cfg = tiny_model();
    let (ce, se, fd) = init_networks(&cfg, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let gain = 10f64.powf(rng.random_range(-3.0..3.0));
        let x = random_tensor(cfg.mel_bins, cfg.frames, &mut rng).map(|v| gain * v);
        let c = ce.encode(&x).unwrap();
        let s = se.encode(&x).unwrap();
        assert!(c.is_finite() && s.is_finite());
        assert!(fd.decode(&s, &c).unwrap().is_finite());
    }
}

#[test]
fn decoder_output_sum_gradient_matches_finite_differences_everywhere() {
    let cfg = tiny_model();
    let (_, _, fd) = init_networks(&cfg, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let speaker = random_tensor(cfg.speaker_dim, 1, &mut rng);
    let content = random_tensor(cfg.content_dim, 1, &mut rng);
    let left = Tensor::filled(1, cfg.mel_bins, 1.0);
    let right = Tensor::filled(cfg.frames, 1, 1.0);

    let analytic: Vec<f64> = {
        let mut g = Graph::new();
        let s = g.constant(&speaker);
        let c = g.constant(&content);
        let out = fd.forward(&mut g, s, c, true);
        let l = g.constant(&left);
        let r = g.constant(&right);
        let rows = g.matmul(l, out);
        let total = g.matmul(rows, r);
        let grads = g.backward(total);
        fd.collect_grads(&g, &grads).iter().flat_map(|t| t.data().to_vec()).collect()
    };
    let x0 = fd.flatten();
    assert_eq!(analytic.len(), x0.len());
    let eps = 1e-6;
    let mut probe = fd.clone();
    let mut x = x0.clone();
    let mut sum_at = |x: &[f64]| {
        probe.assign_flat(x);
        probe.decode(&speaker, &content).unwrap().sum()
    };
    let mut worst: f64 = 0.0;
    for i in 0..x0.len() {
        x[i] = x0[i] + eps;
        let plus = sum_at(&x);
        x[i] = x0[i] - eps;
        let minus = sum_at(&x);
        x[i] = x0[i];
        let numeric = (plus - minus) / (2.0 * eps);
        // Biases feeding an instance norm have exactly zero gradient, where
        // the central difference only sees rounding noise near 1e-9.
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-4);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-3, "max relative error {worst:.3e} over {} parameters", x0.len());
}

#[test]
fn fifty_small_steps_descend_on_one_sample() {
    let cfg = tiny_model();
    let net = perceptual();
    let (_, _, mut fd) = init_networks(&cfg, 5);
    let mut latents = init_latent_tables(1, 1, cfg.content_dim, cfg.speaker_dim, 5, "t".into());
    let ex = random_examples(&cfg, 1, 1, 6);
    let batch: Vec<&Example> = ex.iter().collect();
    let s1 = Stage1Config {
        sigma: 0.0,
        ..Default::default()
    };
    let noise = vec![Tensor::zeros(cfg.content_dim, 1)];
    let mut opt = OptimizerState::new(OptimizerKind::Momentum, 0.0);
    let mut prev = f64::INFINITY;
    for step in 0..50 {
        let out = stage1_loss(&net, &fd, &latents, &batch, &s1, &noise).unwrap();
        assert!(out.loss <= prev, "step {step}: {} > {prev}", out.loss);
        prev = out.loss;
        opt.step_params(&mut fd, "fd", &out.decoder_grads, 1e-3);
        opt.step_rows("c", &mut latents.content, &out.content_grads, 1e-3);
        opt.step_rows("s", &mut latents.speaker, &out.speaker_grads, 1e-3);
    }
}

fn penalty_share(target: PenaltyTarget, lambda: f64, seed: u64) -> f64 {
    let cfg = tiny_model();
    let net = perceptual();
    let (_, _, fd) = init_networks(&cfg, seed);
    let latents = init_latent_tables(4, 2, cfg.content_dim, cfg.speaker_dim, seed, "t".into());
    let ex = random_examples(&cfg, 2, 2, seed);
    let batch: Vec<&Example> = ex.iter().collect();
    let noise = draw_noise(batch.len(), cfg.content_dim, 0.3, &mut ChaCha8Rng::seed_from_u64(seed));
    let loss = |l: f64| {
        let c = Stage1Config {
            lambda_noise: l,
            penalty: target,
            ..Default::default()
        };
        stage1_loss(&net, &fd, &latents, &batch, &c, &noise).unwrap().loss
    };
    loss(lambda) - loss(0.0)
}

#[test]
fn doubling_lambda_doubles_the_penalty() {
    for target in [PenaltyTarget::ContentLatent, PenaltyTarget::Noise] {
        let one = penalty_share(target, 0.25, 7);
        let two = penalty_share(target, 0.5, 7);
        assert!(one > 0.0);
        assert!((two - 2.0 * one).abs() <= 1e-12 * two, "{target:?}: {two} vs 2 x {one}");
    }
}

#[test]
fn identical_seeds_give_identical_noise_and_losses() {
    let cfg = tiny_model();
    let draw = |seed| draw_noise(3, cfg.content_dim, 0.3, &mut ChaCha8Rng::seed_from_u64(seed));
    assert_eq!(draw(8), draw(8));
    assert_ne!(draw(8), draw(9));
    let a = penalty_share(PenaltyTarget::ContentLatent, 0.1, 10);
    let b = penalty_share(PenaltyTarget::ContentLatent, 0.1, 10);
    assert_eq!(a.to_bits(), b.to_bits());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn losses_are_finite_and_nonnegative(seed in 0u64..10_000, sigma in 0.0f64..1.0, lambda in 0.0f64..2.0) {
        let cfg = tiny_model();
        let net = perceptual();
        let (ce, se, fd) = init_networks(&cfg, seed);
        let latents = init_latent_tables(4, 2, cfg.content_dim, cfg.speaker_dim, seed, "t".into());
        let ex = random_examples(&cfg, 2, 2, seed ^ 1);
        let batch: Vec<&Example> = ex.iter().collect();
        let noise = draw_noise(batch.len(), cfg.content_dim, sigma, &mut ChaCha8Rng::seed_from_u64(seed));
        let s1 = Stage1Config { sigma, lambda_noise: lambda, ..Default::default() };
        let one = stage1_loss(&net, &fd, &latents, &batch, &s1, &noise).unwrap();
        prop_assert!(one.loss.is_finite() && one.loss >= 0.0);
        prop_assert!(one.reconstruction >= 0.0 && one.penalty >= 0.0);
        let two = stage2_loss(&net, &ce, &se, &fd, &latents, &batch, &Stage2Config::default()).unwrap();
        prop_assert!(two.loss.is_finite() && two.loss >= 0.0);
        let (a, b) = (two.components.0, two.components.1);
        prop_assert!(a >= 0.0 && b >= 0.0 && two.components.2 >= 0.0);
    }

    #[test]
    fn perceptual_loss_is_symmetric(seed in 0u64..10_000) {
        let cfg = tiny_model();
        let net = perceptual();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_tensor(cfg.mel_bins, cfg.frames, &mut rng);
        let b = random_tensor(cfg.mel_bins, cfg.frames, &mut rng);
        let ab = perceptual_loss(&net, &a, &b).unwrap();
        prop_assert!(ab > 0.0);
        prop_assert_eq!(ab, perceptual_loss(&net, &b, &a).unwrap());
    }

    #[test]
    fn instance_norm_has_zero_mean_and_shrunk_unit_variance(
        seed in 0u64..10_000,
        channels in 1usize..12,
        frames in 2usize..48,
        gain in 0.05f64..20.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(channels, frames, &mut rng).map(|v| gain * v + 3.0);
        let n = instance_norm(&x, NORM_EPS).unwrap();
        for c in 0..channels {
            let row = x.row(c);
            let mu = row.iter().sum::<f64>() / frames as f64;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / frames as f64;
            prop_assume!(var > 1e-3);
            let out = n.row(c);
            let m = out.iter().sum::<f64>() / frames as f64;
            let v = out.iter().map(|o| (o - m).powi(2)).sum::<f64>() / frames as f64;
            prop_assert!(m.abs() < 1e-5);
            prop_assert!((v - var / (var + NORM_EPS)).abs() < 1e-5);
        }
    }
}
