//! Reference-size fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saic_core::dataset::{examples_from_crops, Example};
use saic_core::pipeline::RunConfig;
use saic_core::{ModelConfig, Tensor, Waveform};

/// The model of the default run config.
pub fn reference_model() -> ModelConfig {
    RunConfig::default().model_config()
}

pub fn random_crop(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..cfg.mel_bins * cfg.frames).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::from_vec(cfg.mel_bins, cfg.frames, data).expect("shape")
}

/// `n` random crops spread over 8 speakers, one utterance each.
pub fn batch(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let crops = (0..n).map(|i| (i % 8, random_crop(cfg, &mut rng))).collect();
    examples_from_crops(crops, "bench", -11.5)
}

/// A harmonic tone with vibrato, `seconds` long at 16 kHz.
pub fn tone(seconds: f64) -> Waveform {
    let rate = 16_000u32;
    let n = (seconds * rate as f64) as usize;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / rate as f64;
            let f0 = 150.0 * (1.0 + 0.02 * (2.0 * std::f64::consts::PI * 5.0 * t).sin());
            (1..=6)
                .map(|h| (2.0 * std::f64::consts::PI * f0 * h as f64 * t).sin() / h as f64)
                .sum::<f64>()
                * 0.3
        })
        .collect();
    Waveform {
        samples,
        sample_rate_hz: rate,
    }
}
