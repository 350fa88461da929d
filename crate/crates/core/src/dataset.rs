//! Corpus manifests, train/test splits, crop caching, batching, and the
//! synthetic speaker corpus.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SaicError};
use crate::features::{
    compute_mel, crop_or_pad, hex_prefix, load_waveform, normalize_mel, read_mel_tensor, write_mel_tensor,
    write_wav, CropPolicy, FeatureConfig, MelSpectrogram, MelStats, Waveform,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub speaker_id: String,
    pub utterance_id: String,
    pub audio_path: PathBuf,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub speakers: Vec<String>,
    pub records: Vec<UtteranceRecord>,
    pub feature_config_fingerprint: String,
}

impl Manifest {
    /// Sorts records by `(speaker_id, utterance_id)` and derives the speaker list.
    pub fn new(mut records: Vec<UtteranceRecord>, feature_config_fingerprint: String) -> Result<Self> {
        records.sort_by(|a, b| (&a.speaker_id, &a.utterance_id).cmp(&(&b.speaker_id, &b.utterance_id)));
        let mut seen = BTreeSet::new();
        for r in &records {
            if !seen.insert(r.utterance_id.as_str()) {
                return Err(SaicError::Manifest(format!("duplicate utterance_id {}", r.utterance_id)));
            }
        }
        let speakers: Vec<String> = records
            .iter()
            .map(|r| r.speaker_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Ok(Self {
            speakers,
            records,
            feature_config_fingerprint,
        })
    }

    /// Corpus-level invariants: at least two speakers, each with at least two utterances.
    pub fn validate(&self) -> Result<()> {
        let derived: Vec<String> = self
            .records
            .iter()
            .map(|r| r.speaker_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if derived != self.speakers {
            return Err(SaicError::Manifest("speaker list does not match records".into()));
        }
        if self.speakers.len() < 2 {
            return Err(SaicError::Manifest(format!("need >= 2 speakers, found {}", self.speakers.len())));
        }
        for (spk, n) in self.utterances_per_speaker() {
            if n < 2 {
                return Err(SaicError::Manifest(format!("speaker {spk} has {n} utterance(s), need >= 2")));
            }
        }
        Ok(())
    }

    fn utterances_per_speaker(&self) -> BTreeMap<&str, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.speaker_id.as_str()).or_insert(0) += 1;
        }
        counts
    }

    pub fn speaker_index(&self, speaker_id: &str) -> Option<usize> {
        self.speakers.binary_search_by(|s| s.as_str().cmp(speaker_id)).ok()
    }

    /// Record indices of one split, in manifest order. The position in this
    /// list is the utterance index used by latent tables.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == split).collect()
    }

    /// Identifies speakers, utterances, splits and features. Audio locations
    /// are excluded so a relocated corpus keeps its checkpoints valid.
    pub fn fingerprint(&self) -> String {
        let records: Vec<(&str, &str, Split)> = self
            .records
            .iter()
            .map(|r| (r.speaker_id.as_str(), r.utterance_id.as_str(), r.split))
            .collect();
        let json = serde_json::to_vec(&(&self.speakers, records, &self.feature_config_fingerprint))
            .expect("manifest serializes");
        hex_prefix(&Sha256::digest(&json), 8)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| SaicError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SaicError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Keeps only the given record indices.
    pub fn subset(&self, record_indices: &[usize]) -> Result<Self> {
        Self::new(
            record_indices.iter().map(|&i| self.records[i].clone()).collect(),
            self.feature_config_fingerprint.clone(),
        )
    }
}

fn is_wav(p: &Path) -> bool {
    p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

/// Indexes `root/<speaker_id>/*.wav`. Utterance ids are `speaker_id/file_stem`.
pub fn scan_corpus(root: &Path, feature_config_fingerprint: &str) -> Result<Manifest> {
    let entries = fs::read_dir(root).map_err(|e| SaicError::io(root, e))?;
    let mut speaker_dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    speaker_dirs.sort();
    if speaker_dirs.is_empty() {
        return Err(SaicError::Manifest(format!("no speakers found under {}", root.display())));
    }
    let mut records = Vec::new();
    for dir in speaker_dirs {
        let speaker_id = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let mut wavs: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| SaicError::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_wav(p))
            .collect();
        wavs.sort();
        if wavs.is_empty() {
            return Err(SaicError::Manifest(format!("speaker directory {} has no audio", dir.display())));
        }
        for wav in wavs {
            let stem = wav.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            records.push(UtteranceRecord {
                utterance_id: format!("{speaker_id}/{stem}"),
                speaker_id: speaker_id.clone(),
                audio_path: wav,
                split: Split::Train,
            });
        }
    }
    let manifest = Manifest::new(records, feature_config_fingerprint.to_string())?;
    manifest.validate()?;
    Ok(manifest)
}

/// Per-speaker stratified split; `round(n · test_fraction)` utterances per
/// speaker go to the test split.
pub fn make_splits(m: &Manifest, test_fraction: f64, seed: u64) -> Result<Manifest> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(SaicError::config("data.test_fraction", "must lie in (0, 1)"));
    }
    let mut out = m.clone();
    for (s, speaker) in m.speakers.iter().enumerate() {
        let mut idx: Vec<usize> = (0..m.records.len()).filter(|&i| &m.records[i].speaker_id == speaker).collect();
        let n = idx.len();
        let n_test = (n as f64 * test_fraction).round() as usize;
        if n_test == 0 || n_test >= n {
            return Err(SaicError::Manifest(format!(
                "speaker {speaker}: {n} utterance(s) at test fraction {test_fraction} leaves an empty split"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(s as u64 + 1)));
        idx.shuffle(&mut rng);
        for (k, &i) in idx.iter().enumerate() {
            out.records[i].split = if k < n_test { Split::Test } else { Split::Train };
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Synthetic corpus

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthCorpusConfig {
    pub num_speakers: usize,
    pub utterances_per_speaker: usize,
    pub duration_s: f64,
    pub seed: u64,
    pub speaker_f0_range_hz: (f64, f64),
    pub content_vocabulary_size: usize,
    pub tones_per_utterance: usize,
    #[serde(default = "default_rate")]
    pub sample_rate_hz: u32,
    /// When non-zero, utterances draw their token sequence from this many
    /// shared sentences so content recurs across speakers. Zero draws every
    /// sequence independently.
    #[serde(default)]
    pub sentence_pool_size: usize,
}

fn default_rate() -> u32 {
    16_000
}

impl Default for SynthCorpusConfig {
    fn default() -> Self {
        Self {
            num_speakers: 8,
            utterances_per_speaker: 20,
            duration_s: 3.0,
            seed: 17,
            speaker_f0_range_hz: (100.0, 300.0),
            content_vocabulary_size: 12,
            tones_per_utterance: 8,
            sample_rate_hz: 16_000,
            sentence_pool_size: 0,
        }
    }
}

impl SynthCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |f: &str, m: &str| Err(SaicError::config(format!("data.synth.{f}"), m));
        if self.num_speakers < 2 {
            return err("num_speakers", "must be >= 2");
        }
        if self.utterances_per_speaker < 2 {
            return err("utterances_per_speaker", "must be >= 2");
        }
        if self.content_vocabulary_size < 2 {
            return err("content_vocabulary_size", "must be >= 2");
        }
        if self.tones_per_utterance == 0 {
            return err("tones_per_utterance", "must be >= 1");
        }
        let (lo, hi) = self.speaker_f0_range_hz;
        if !(lo > 0.0 && lo < hi && hi * HARMONICS as f64 <= self.sample_rate_hz as f64 / 2.0) {
            return err("speaker_f0_range_hz", "must satisfy 0 < min < max with all harmonics below Nyquist");
        }
        if !(self.duration_s > 0.0) {
            return err("duration_s", "must be positive");
        }
        Ok(())
    }
}

pub const HARMONICS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerSignature {
    pub speaker_id: String,
    pub f0_hz: f64,
    pub harmonic_profile: [f64; HARMONICS],
}

/// One vocabulary entry: how a content token bends pitch, timing and level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContentToken {
    pub pitch_offset_semitones: f64,
    pub duration_weight: f64,
    pub level: f64,
}

/// Ground truth written next to every synthetic WAV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceMetadata {
    pub speaker_id: String,
    pub f0_hz: f64,
    pub harmonic_profile: [f64; HARMONICS],
    pub token_sequence: Vec<usize>,
}

/// Speakers and vocabulary derived from the seed alone.
pub fn synth_design(cfg: &SynthCorpusConfig) -> (Vec<SpeakerSignature>, Vec<ContentToken>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (lo, hi) = cfg.speaker_f0_range_hz;
    let n = cfg.num_speakers;
    // log-stratified pitches keep neighbouring speakers apart
    let mut f0s: Vec<f64> = (0..n)
        .map(|s| {
            let u = (s as f64 + 0.5 + rng.random_range(-0.2..0.2)) / n as f64;
            lo * (hi / lo).powf(u)
        })
        .collect();
    f0s.shuffle(&mut rng);
    let speakers = f0s
        .into_iter()
        .enumerate()
        .map(|(s, f0_hz)| {
            let tilt = rng.random_range(0.3..1.2);
            let mut profile = [0.0; HARMONICS];
            for (h, a) in profile.iter_mut().enumerate() {
                *a = rng.random_range(0.3..1.0) / ((h + 1) as f64).powf(tilt);
            }
            let peak = profile.iter().cloned().fold(0.0, f64::max);
            profile.iter_mut().for_each(|a| *a /= peak);
            SpeakerSignature {
                speaker_id: format!("spk{s:02}"),
                f0_hz,
                harmonic_profile: profile,
            }
        })
        .collect();
    let vocabulary = (0..cfg.content_vocabulary_size)
        .map(|_| ContentToken {
            pitch_offset_semitones: rng.random_range(-0.5..0.5),
            duration_weight: rng.random_range(0.5..1.5),
            level: rng.random_range(0.35..1.0),
        })
        .collect();
    (speakers, vocabulary)
}

const GAP_S: f64 = 0.03;
const ATTACK_S: f64 = 0.015;
const RELEASE_S: f64 = 0.03;

/// Renders a token sequence with one speaker's harmonic stack.
pub fn render_utterance(
    speaker: &SpeakerSignature,
    vocabulary: &[ContentToken],
    tokens: &[usize],
    duration_s: f64,
    sample_rate: u32,
) -> Waveform {
    let sr = sample_rate as f64;
    let total = (duration_s * sr).round() as usize;
    let weight_sum: f64 = tokens.iter().map(|&t| vocabulary[t].duration_weight).sum();
    let mut samples = Vec::with_capacity(total);
    let mut phase = 0.0f64;
    let mut consumed = 0.0;
    for &t in tokens {
        let tok = &vocabulary[t];
        consumed += tok.duration_weight;
        let end = ((consumed / weight_sum) * total as f64).round() as usize;
        let len = end - samples.len();
        let voiced = len.saturating_sub((GAP_S * sr) as usize);
        let f = speaker.f0_hz * 2f64.powf(tok.pitch_offset_semitones / 12.0);
        let attack = (ATTACK_S * sr) as usize;
        let release = (RELEASE_S * sr) as usize;
        for i in 0..len {
            if i >= voiced {
                samples.push(0.0);
                continue;
            }
            let env = if i < attack {
                0.5 - 0.5 * (PI * i as f64 / attack as f64).cos()
            } else if i + release > voiced {
                0.5 - 0.5 * (PI * (voiced - i) as f64 / release as f64).cos()
            } else {
                1.0
            };
            let mut v = 0.0;
            for (h, a) in speaker.harmonic_profile.iter().enumerate() {
                v += a * ((h + 1) as f64 * phase).sin();
            }
            samples.push(tok.level * env * v);
            phase = (phase + 2.0 * PI * f / sr) % (2.0 * PI);
        }
    }
    samples.resize(total, 0.0);
    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 0.0 {
        samples.iter_mut().for_each(|s| *s *= 0.9 / peak);
    }
    Waveform {
        samples,
        sample_rate_hz: sample_rate,
    }
}

/// Writes `out_dir/<speaker>/<utterance>.wav` plus a `.json` sidecar per
/// utterance and `out_dir/manifest.json`.
pub fn generate_synthetic_corpus(cfg: &SynthCorpusConfig, out_dir: &Path, feature_config_fingerprint: &str) -> Result<Manifest> {
    cfg.validate()?;
    let (speakers, vocabulary) = synth_design(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let pool: Vec<Vec<usize>> = (0..cfg.sentence_pool_size)
        .map(|_| {
            (0..cfg.tones_per_utterance)
                .map(|_| rng.random_range(0..cfg.content_vocabulary_size))
                .collect()
        })
        .collect();
    let mut records = Vec::new();
    for spk in &speakers {
        let dir = out_dir.join(&spk.speaker_id);
        fs::create_dir_all(&dir).map_err(|e| SaicError::io(&dir, e))?;
        for u in 0..cfg.utterances_per_speaker {
            let tokens: Vec<usize> = if pool.is_empty() {
                (0..cfg.tones_per_utterance)
                    .map(|_| rng.random_range(0..cfg.content_vocabulary_size))
                    .collect()
            } else {
                pool[rng.random_range(0..pool.len())].clone()
            };
            let wave = render_utterance(spk, &vocabulary, &tokens, cfg.duration_s, cfg.sample_rate_hz);
            let stem = format!("{}_u{u:03}", spk.speaker_id);
            let wav_path = dir.join(format!("{stem}.wav"));
            write_wav(&wav_path, &wave)?;
            let meta = UtteranceMetadata {
                speaker_id: spk.speaker_id.clone(),
                f0_hz: spk.f0_hz,
                harmonic_profile: spk.harmonic_profile,
                token_sequence: tokens,
            };
            let meta_path = dir.join(format!("{stem}.json"));
            fs::write(&meta_path, serde_json::to_string_pretty(&meta)?).map_err(|e| SaicError::io(&meta_path, e))?;
            records.push(UtteranceRecord {
                speaker_id: spk.speaker_id.clone(),
                utterance_id: format!("{}/{stem}", spk.speaker_id),
                audio_path: wav_path,
                split: Split::Train,
            });
        }
    }
    let manifest = Manifest::new(records, feature_config_fingerprint.to_string())?;
    manifest.validate()?;
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

pub fn read_metadata(wav_path: &Path) -> Result<UtteranceMetadata> {
    let path = wav_path.with_extension("json");
    let text = fs::read_to_string(&path).map_err(|e| SaicError::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

// ---------------------------------------------------------------------------
// Prepared crops

/// One fixed-size, normalized training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// Index into `Manifest::records`.
    pub record: usize,
    /// Position within its split; the latent-table row for train examples.
    pub utterance: usize,
    pub speaker: usize,
    pub crop: MelSpectrogram,
}

#[derive(Clone, Debug)]
pub struct PreparedData {
    pub manifest: Manifest,
    pub feature: FeatureConfig,
    pub stats: MelStats,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

impl PreparedData {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn num_speakers(&self) -> usize {
        self.manifest.speakers.len()
    }

    /// Restricts to the given train utterance positions (test split dropped),
    /// re-deriving indices. Statistics are kept.
    pub fn train_subset(&self, positions: &[usize]) -> Result<Self> {
        let records: Vec<usize> = positions.iter().map(|&p| self.train[p].record).collect();
        let manifest = self.manifest.subset(&records)?;
        let mut train = Vec::new();
        for (i, r) in manifest.records.iter().enumerate() {
            let src = self
                .train
                .iter()
                .find(|e| self.manifest.records[e.record].utterance_id == r.utterance_id)
                .expect("subset record");
            train.push(Example {
                record: i,
                utterance: i,
                speaker: manifest.speaker_index(&r.speaker_id).expect("speaker"),
                crop: src.crop.clone(),
            });
        }
        Ok(Self {
            manifest,
            feature: self.feature.clone(),
            stats: self.stats.clone(),
            train,
            test: Vec::new(),
        })
    }
}

fn cache_path(cache_dir: &Path, fingerprint: &str, utterance_id: &str) -> PathBuf {
    cache_dir.join(fingerprint).join(format!("{}.mel", utterance_id.replace(['/', '\\'], "__")))
}

/// Raw (unnormalized) centre crop of one utterance, rounded through `f32` so
/// fresh and cached crops agree bit for bit.
pub fn raw_crop(path: &Path, cfg: &FeatureConfig) -> Result<MelSpectrogram> {
    let wave = load_waveform(path, cfg.sample_rate_hz)?;
    let mel = compute_mel(&wave, cfg)?;
    let mut crop = crop_or_pad(&mel, cfg.frames_per_crop, CropPolicy::Center);
    crop.values = crop.values.map(|v| v as f32 as f64);
    Ok(crop)
}

/// Loads or computes the centre crop of every record. With a cache directory,
/// crops are stored under `<cache>/<fingerprint>/` and reused when present.
pub fn load_crops(m: &Manifest, cfg: &FeatureConfig, cache_dir: Option<&Path>) -> Result<(Vec<MelSpectrogram>, usize)> {
    cfg.validate()?;
    let fp = cfg.fingerprint();
    if let Some(dir) = cache_dir {
        let d = dir.join(&fp);
        fs::create_dir_all(&d).map_err(|e| SaicError::io(&d, e))?;
    }
    let mut written = 0;
    let mut crops = Vec::with_capacity(m.records.len());
    for r in &m.records {
        let crop = match cache_dir.map(|d| cache_path(d, &fp, &r.utterance_id)) {
            Some(path) if path.exists() => {
                let values = read_mel_tensor(&path)?;
                if values.shape() != (cfg.mel_bins, cfg.frames_per_crop) {
                    return Err(SaicError::Shape(format!("cached crop {} has shape {:?}", path.display(), values.shape())));
                }
                MelSpectrogram {
                    values,
                    config_fingerprint: fp.clone(),
                    floor_value: cfg.floor_value(),
                }
            }
            Some(path) => {
                let crop = raw_crop(&r.audio_path, cfg)?;
                write_mel_tensor(&path, &crop.values)?;
                written += 1;
                crop
            }
            None => raw_crop(&r.audio_path, cfg)?,
        };
        crops.push(crop);
    }
    Ok((crops, written))
}

/// Normalization statistics from the train split, then normalized examples for both splits.
pub fn prepare(m: &Manifest, cfg: &FeatureConfig, raw: &[MelSpectrogram]) -> Result<PreparedData> {
    if raw.len() != m.records.len() {
        return Err(SaicError::Shape("one crop per manifest record required".into()));
    }
    let train_idx = m.split_indices(Split::Train);
    let test_idx = m.split_indices(Split::Test);
    if train_idx.is_empty() {
        return Err(SaicError::Manifest("train split is empty".into()));
    }
    let stats = MelStats::from_mels(train_idx.iter().map(|&i| &raw[i]))?;
    let build = |idx: &[usize]| -> Result<Vec<Example>> {
        idx.iter()
            .enumerate()
            .map(|(pos, &i)| {
                Ok(Example {
                    record: i,
                    utterance: pos,
                    speaker: m.speaker_index(&m.records[i].speaker_id).expect("speaker listed"),
                    crop: normalize_mel(&raw[i], &stats)?,
                })
            })
            .collect()
    };
    Ok(PreparedData {
        manifest: m.clone(),
        feature: cfg.clone(),
        stats: stats.clone(),
        train: build(&train_idx)?,
        test: build(&test_idx)?,
    })
}

// ---------------------------------------------------------------------------
// Batching

/// Shuffled mini-batches over one split; deterministic per `(seed, epoch)`.
pub struct BatchIter<'a> {
    examples: &'a [Example],
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

pub fn batch_iter(examples: &[Example], batch_size: usize, seed: u64, epoch: u64) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(SaicError::config("batch_size", "must be >= 1"));
    }
    if examples.is_empty() {
        return Err(SaicError::Manifest("cannot batch an empty split".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    Ok(BatchIter {
        examples,
        order,
        batch_size,
        pos: 0,
    })
}

impl<'a> Iterator for BatchIter<'a> {
    type Item = Vec<&'a Example>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end].iter().map(|&i| &self.examples[i]).collect();
        self.pos = end;
        Some(batch)
    }
}

/// Builds an in-memory example list without audio, for tests and tools.
pub fn examples_from_crops(crops: Vec<(usize, Tensor)>, fingerprint: &str, floor_value: f64) -> Vec<Example> {
    crops
        .into_iter()
        .enumerate()
        .map(|(i, (speaker, values))| Example {
            record: i,
            utterance: i,
            speaker,
            crop: MelSpectrogram {
                values,
                config_fingerprint: fingerprint.to_string(),
                floor_value,
            },
        })
        .collect()
}
