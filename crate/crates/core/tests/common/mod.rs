#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saic_core::dataset::{examples_from_crops, Example, Manifest, PreparedData, Split, UtteranceRecord};
use saic_core::losses::{stage2_loss, PerceptualNet, Stage2Config};
use saic_core::model::{ContentEncoder, FusionDecoder, SpeakerEncoder};
use saic_core::training::LatentTables;
use saic_core::{FeatureConfig, MelStats, ModelConfig, Parameters, Result, Tensor};

/// Small enough for exhaustive finite differences.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        mel_bins: 8,
        frames: 8,
        hidden: 16,
        kernel: 3,
        content_dim: 8,
        speaker_dim: 8,
        decoder_layers: 2,
    }
}

pub fn random_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

/// `per` random crops for each of `speakers` speakers, numbered in order.
pub fn random_examples(cfg: &ModelConfig, speakers: usize, per: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let crops = (0..speakers)
        .flat_map(|s| (0..per).map(move |_| s))
        .map(|s| (s, random_tensor(cfg.mel_bins, cfg.frames, &mut rng)))
        .collect();
    examples_from_crops(crops, "test", -11.5)
}

/// Full stage-2 loss and its gradient with every CE, SE and decoder
/// parameter replaced by `x`, in that order.
#[allow(clippy::too_many_arguments)]
pub fn stage2_at(
    net: &PerceptualNet,
    nets: &(ContentEncoder, SpeakerEncoder, FusionDecoder),
    latents: &LatentTables,
    batch: &[&Example],
    cfg: &Stage2Config,
    x: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let (mut ce, mut se, mut fd) = nets.clone();
    let mut used = ce.assign_flat(x);
    used += se.assign_flat(&x[used..]);
    used += fd.assign_flat(&x[used..]);
    assert_eq!(used, x.len());
    let out = stage2_loss(net, &ce, &se, &fd, latents, batch, cfg)?;
    let mut g: Vec<f64> = Vec::with_capacity(x.len());
    let decoder = out.decoder_grads.unwrap_or_else(|| fd.named_tensors("").iter().map(|(_, t)| Tensor::zeros(t.rows(), t.cols())).collect());
    for t in out.ce_grads.iter().chain(&out.se_grads).chain(&decoder) {
        g.extend_from_slice(t.data());
    }
    Ok((out.loss, g))
}

pub fn flat_params(nets: &(ContentEncoder, SpeakerEncoder, FusionDecoder)) -> Vec<f64> {
    let mut x = nets.0.flatten();
    x.extend(nets.1.flatten());
    x.extend(nets.2.flatten());
    x
}

/// One speaker, one train utterance: `data.train[position]` on its own.
pub fn single_utterance(data: &PreparedData, position: usize) -> PreparedData {
    let ex = &data.train[position];
    let mut record = data.manifest.records[ex.record].clone();
    record.split = Split::Train;
    let manifest = Manifest::new(vec![record], data.manifest.feature_config_fingerprint.clone()).unwrap();
    PreparedData {
        manifest,
        feature: data.feature.clone(),
        stats: data.stats.clone(),
        train: vec![Example {
            record: 0,
            utterance: 0,
            speaker: 0,
            crop: ex.crop.clone(),
        }],
        test: Vec::new(),
    }
}

/// Random-crop training data shaped for [`tiny_model`].
pub fn tiny_data(speakers: usize, per: usize, seed: u64) -> PreparedData {
    let model = tiny_model();
    let feature = FeatureConfig {
        mel_bins: model.mel_bins,
        frames_per_crop: model.frames,
        ..FeatureConfig::default()
    };
    let records = (0..speakers)
        .flat_map(|s| {
            (0..per).map(move |u| UtteranceRecord {
                speaker_id: format!("spk{s:02}"),
                utterance_id: format!("spk{s:02}/u{u}"),
                audio_path: format!("/nonexistent/{s}_{u}.wav").into(),
                split: Split::Train,
            })
        })
        .collect();
    let manifest = Manifest::new(records, feature.fingerprint()).unwrap();
    let mut train = random_examples(&model, speakers, per, seed);
    for ex in &mut train {
        ex.crop.config_fingerprint = feature.fingerprint();
        ex.crop.floor_value = feature.floor_value();
    }
    PreparedData {
        manifest,
        stats: MelStats::identity(feature.mel_bins),
        train,
        test: Vec::new(),
        feature,
    }
}
