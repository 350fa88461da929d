use proptest::prelude::*;
use saic_core::dataset::{generate_synthetic_corpus, read_metadata, SynthCorpusConfig};
use saic_core::features::{
    compute_mel, crop_or_pad, denormalize_mel, load_waveform, mel_to_waveform, normalize_mel, CropPolicy, FeatureConfig,
    MelStats, Waveform,
};

/// Mean absolute error bound for `compute_mel(mel_to_waveform(M))` against `M`
/// on synthetic utterances, measured on the default front-end.
const ROUND_TRIP_MAE_BOUND: f64 = 0.3;

fn small_cfg() -> FeatureConfig {
    FeatureConfig {
        window_length_samples: 256,
        hop_length_samples: 64,
        fft_size: 256,
        mel_bins: 16,
        frames_per_crop: 8,
        ..FeatureConfig::default()
    }
}

fn wave(samples: Vec<f64>) -> Waveform {
    Waveform {
        samples,
        sample_rate_hz: 16_000,
    }
}

fn samples() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, 256..1200)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn mel_is_bit_deterministic(s in samples()) {
        let cfg = small_cfg();
        let a = compute_mel(&wave(s.clone()), &cfg).unwrap();
        let b = compute_mel(&wave(s), &cfg).unwrap();
        let bits = |m: &saic_core::MelSpectrogram| m.values.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn louder_input_never_lowers_entries_above_floor(s in samples(), gain in 1.0f64..8.0) {
        let cfg = small_cfg();
        let base = compute_mel(&wave(s.clone()), &cfg).unwrap();
        let loud = compute_mel(&wave(s.iter().map(|v| v * gain).collect()), &cfg).unwrap();
        for (a, b) in base.values.data().iter().zip(loud.values.data()) {
            if *a > base.floor_value {
                prop_assert!(*b >= *a - 1e-9, "{} -> {}", a, b);
            }
        }
    }

    #[test]
    fn start_crop_is_idempotent(s in samples(), frames in 1usize..20) {
        let m = compute_mel(&wave(s), &small_cfg()).unwrap();
        let once = crop_or_pad(&m, frames, CropPolicy::Start);
        let twice = crop_or_pad(&once, frames, CropPolicy::Start);
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn crop_always_has_requested_length(s in samples(), frames in 1usize..40, seed in any::<u64>()) {
        let m = compute_mel(&wave(s), &small_cfg()).unwrap();
        for policy in [CropPolicy::Start, CropPolicy::Center, CropPolicy::Random(seed)] {
            let c = crop_or_pad(&m, frames, policy);
            prop_assert_eq!(c.frames(), frames);
            prop_assert_eq!(c.mel_bins(), m.mel_bins());
        }
    }

    #[test]
    fn normalization_inverts(s in samples(), shift in -5.0f64..5.0, scale in 0.1f64..4.0) {
        let m = compute_mel(&wave(s), &small_cfg()).unwrap();
        let bins = m.mel_bins();
        let stats = MelStats {
            mean: (0..bins).map(|b| shift + b as f64 * 0.1).collect(),
            std: (0..bins).map(|b| scale * (1.0 + b as f64 * 0.05)).collect(),
        };
        let back = denormalize_mel(&normalize_mel(&m, &stats).unwrap(), &stats).unwrap();
        for (a, b) in m.values.data().iter().zip(back.values.data()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
        prop_assert_eq!(back.config_fingerprint, m.config_fingerprint);
    }
}

#[test]
fn griffin_lim_round_trip_stays_within_bound() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = FeatureConfig::default();
    let synth = SynthCorpusConfig {
        num_speakers: 3,
        utterances_per_speaker: 2,
        duration_s: 1.0,
        ..Default::default()
    };
    let m = generate_synthetic_corpus(&synth, dir.path(), &cfg.fingerprint()).unwrap();
    let mut total = 0.0;
    for r in &m.records {
        let mel = compute_mel(&load_waveform(&r.audio_path, cfg.sample_rate_hz).unwrap(), &cfg).unwrap();
        let audio = mel_to_waveform(&mel, &cfg, 32).unwrap();
        let back = compute_mel(&audio, &cfg).unwrap();
        // peak normalization shifts the log-mel by a constant, so compare after
        // removing each spectrogram's mean
        let n = mel.frames().min(back.frames());
        let centre = |t: &saic_core::MelSpectrogram| {
            let mut s = 0.0;
            for r in 0..t.mel_bins() {
                s += t.values.row(r)[..n].iter().sum::<f64>();
            }
            s / (n * t.mel_bins()) as f64
        };
        let (ca, cb) = (centre(&mel), centre(&back));
        let mut err = 0.0;
        for r in 0..mel.mel_bins() {
            for (a, b) in mel.values.row(r)[..n].iter().zip(&back.values.row(r)[..n]) {
                err += ((a - ca) - (b - cb)).abs();
            }
        }
        total += err / (n * mel.mel_bins()) as f64;
    }
    let mae = total / m.records.len() as f64;
    println!("round-trip mean absolute error {mae:.4}");
    assert!(mae < ROUND_TRIP_MAE_BOUND, "round-trip error {mae}");
}

#[test]
fn sentence_pool_repeats_content_across_speakers() {
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthCorpusConfig {
        num_speakers: 3,
        utterances_per_speaker: 4,
        duration_s: 0.5,
        sentence_pool_size: 2,
        ..Default::default()
    };
    let m = generate_synthetic_corpus(&synth, dir.path(), "fp").unwrap();
    let mut seqs: Vec<Vec<usize>> = m
        .records
        .iter()
        .map(|r| read_metadata(&r.audio_path).unwrap().token_sequence)
        .collect();
    seqs.sort();
    seqs.dedup();
    assert!(seqs.len() <= 2);
}
