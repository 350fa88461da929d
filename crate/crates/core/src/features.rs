//! Waveform I/O, log-mel extraction, normalization, cropping and Griffin–Lim
//! inversion.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SaicError};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub sample_rate_hz: u32,
    pub window_length_samples: usize,
    pub hop_length_samples: usize,
    pub fft_size: usize,
    pub mel_bins: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    /// Minimum mel magnitude before the logarithm.
    pub log_floor: f64,
    pub frames_per_crop: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 16_000,
            window_length_samples: 1024,
            hop_length_samples: 256,
            fft_size: 1024,
            mel_bins: 80,
            fmin_hz: 0.0,
            fmax_hz: 8000.0,
            log_floor: 1e-5,
            frames_per_crop: 64,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |f: &str, m: &str| Err(SaicError::config(format!("feature.{f}"), m));
        if self.sample_rate_hz == 0 {
            return err("sample_rate_hz", "must be positive");
        }
        if self.hop_length_samples == 0 || self.hop_length_samples > self.window_length_samples {
            return err("hop_length_samples", "must satisfy 0 < hop <= window_length_samples");
        }
        if self.window_length_samples > self.fft_size {
            return err("window_length_samples", "must not exceed fft_size");
        }
        if self.mel_bins == 0 {
            return err("mel_bins", "must be positive");
        }
        if !(self.fmin_hz >= 0.0 && self.fmin_hz < self.fmax_hz) {
            return err("fmin_hz", "must satisfy 0 <= fmin_hz < fmax_hz");
        }
        if self.fmax_hz > self.sample_rate_hz as f64 / 2.0 {
            return err("fmax_hz", "must not exceed the Nyquist frequency");
        }
        if !(self.log_floor > 0.0) {
            return err("log_floor", "must be positive");
        }
        if self.frames_per_crop == 0 {
            return err("frames_per_crop", "must be positive");
        }
        Ok(())
    }

    /// Short stable hash of every field; tags every derived spectrogram.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex_prefix(&Sha256::digest(&json), 8)
    }

    /// Value of a floored (silent) entry.
    pub fn floor_value(&self) -> f64 {
        self.log_floor.ln()
    }

    pub fn freq_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }
}

pub(crate) fn hex_prefix(bytes: &[u8], n: usize) -> String {
    bytes.iter().take(n).map(|b| format!("{b:02x}")).collect()
}

/// Log-magnitude mel spectrogram, `mel_bins × frames`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub values: Tensor,
    pub config_fingerprint: String,
    /// `ln(log_floor)` of the producing config; used as the padding value.
    pub floor_value: f64,
}

impl MelSpectrogram {
    pub fn mel_bins(&self) -> usize {
        self.values.rows()
    }

    pub fn frames(&self) -> usize {
        self.values.cols()
    }
}

// ---------------------------------------------------------------------------
// Waveform I/O

pub fn load_waveform(path: &Path, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(SaicError::config("target_rate", "must be positive"));
    }
    let file = File::open(path).map_err(|e| SaicError::io(path, e))?;
    let reader = hound::WavReader::new(BufReader::new(file))
        .map_err(|e| SaicError::Audio(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>(),
        (hound::SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 * scale))
                .collect::<std::result::Result<_, _>>()
        }
        (fmt, bits) => {
            return Err(SaicError::Audio(format!(
                "{}: unsupported encoding {fmt:?}/{bits} bit",
                path.display()
            )))
        }
    }
    .map_err(|e| SaicError::Audio(format!("{}: {e}", path.display())))?;

    let mono: Vec<f64> = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    if mono.is_empty() {
        return Err(SaicError::Audio(format!("{}: zero-length audio", path.display())));
    }
    let mut samples = resample_linear(&mono, spec.sample_rate, target_rate);
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(SaicError::Audio(format!("{}: non-finite samples", path.display())));
    }
    peak_normalize(&mut samples);
    Ok(Waveform {
        samples,
        sample_rate_hz: target_rate,
    })
}

/// Writes 16-bit PCM; samples are clamped to [-1, 1].
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let io = |e: hound::Error| match e {
        hound::Error::IoError(e) => SaicError::io(path, e),
        other => SaicError::Audio(format!("{}: {other}", path.display())),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(io)?;
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(io)?;
    }
    writer.finalize().map_err(io)
}

/// Linear-interpolation resampler. Output length is `round(len · to / from)`.
pub fn resample_linear(samples: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to || samples.is_empty() {
        return samples.to_vec();
    }
    let ratio = from as f64 / to as f64;
    let out_len = ((samples.len() as f64) * to as f64 / from as f64).round() as usize;
    let last = samples.len() - 1;
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let i0 = (pos.floor() as usize).min(last);
            let i1 = (i0 + 1).min(last);
            let frac = pos - i0 as f64;
            samples[i0] * (1.0 - frac) + samples[i1] * frac
        })
        .collect()
}

/// Scales so that `max |sample| = 1`; all-zero input is left untouched.
pub fn peak_normalize(samples: &mut [f64]) {
    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 0.0 {
        samples.iter_mut().for_each(|s| *s /= peak);
    }
}

// ---------------------------------------------------------------------------
// Mel scale and filterbank

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular, area-normalized filters, `mel_bins × freq_bins`.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    pub weights: Tensor,
    pub centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &FeatureConfig) -> Self {
        let n_freq = cfg.freq_bins();
        let (lo, hi) = (hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz));
        let points: Vec<f64> = (0..cfg.mel_bins + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.mel_bins + 1) as f64))
            .collect();
        let bin_hz = cfg.sample_rate_hz as f64 / cfg.fft_size as f64;
        let mut weights = Tensor::zeros(cfg.mel_bins, n_freq);
        for m in 0..cfg.mel_bins {
            let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
            let area = 2.0 / (right - left);
            for k in 0..n_freq {
                let f = k as f64 * bin_hz;
                let rise = (f - left) / (center - left);
                let fall = (right - f) / (right - center);
                let w = rise.min(fall).max(0.0);
                if w > 0.0 {
                    weights.set(m, k, w * area);
                }
            }
        }
        Self {
            weights,
            centers_hz: points[1..=cfg.mel_bins].to_vec(),
        }
    }

    /// Non-negative least-squares inversion `mel → linear` by multiplicative
    /// updates, started from the transpose projection.
    fn invert(&self, mel: &Tensor, iterations: usize) -> Tensor {
        let wt = self.weights.transpose();
        let mut lin = wt.matmul(mel);
        let numer = lin.clone();
        for _ in 0..iterations {
            let denom = wt.matmul(&self.weights.matmul(&lin));
            for ((x, n), d) in lin.data_mut().iter_mut().zip(numer.data()).zip(denom.data()) {
                *x *= n / (d + 1e-12);
            }
        }
        lin
    }
}

// ---------------------------------------------------------------------------
// STFT

struct Stft {
    window: Vec<f64>,
    fft_size: usize,
    hop: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Stft {
    fn new(cfg: &FeatureConfig) -> Self {
        let n = cfg.window_length_samples;
        // periodic Hann
        let window = (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect();
        let mut planner = FftPlanner::new();
        Self {
            window,
            fft_size: cfg.fft_size,
            hop: cfg.hop_length_samples,
            forward: planner.plan_fft_forward(cfg.fft_size),
            inverse: planner.plan_fft_inverse(cfg.fft_size),
        }
    }

    fn frame_count(&self, len: usize) -> usize {
        1 + (len - self.window.len()) / self.hop
    }

    /// Complex spectrum per frame, `frames × (fft/2 + 1)`.
    fn analyze(&self, samples: &[f64]) -> Vec<Vec<Complex<f64>>> {
        let frames = self.frame_count(samples.len());
        let n_freq = self.fft_size / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_size];
        (0..frames)
            .map(|t| {
                buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
                let start = t * self.hop;
                for (i, w) in self.window.iter().enumerate() {
                    buf[i] = Complex::new(samples[start + i] * w, 0.0);
                }
                self.forward.process(&mut buf);
                buf[..n_freq].to_vec()
            })
            .collect()
    }

    /// Weighted overlap-add inverse of [`Stft::analyze`].
    fn synthesize(&self, spectra: &[Vec<Complex<f64>>]) -> Vec<f64> {
        let win = self.window.len();
        let len = (spectra.len().saturating_sub(1)) * self.hop + win;
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_size];
        let n_freq = self.fft_size / 2 + 1;
        for (t, spec) in spectra.iter().enumerate() {
            buf[..n_freq].copy_from_slice(spec);
            for k in n_freq..self.fft_size {
                buf[k] = buf[self.fft_size - k].conj();
            }
            self.inverse.process(&mut buf);
            let start = t * self.hop;
            for (i, w) in self.window.iter().enumerate() {
                out[start + i] += buf[i].re / self.fft_size as f64 * w;
                norm[start + i] += w * w;
            }
        }
        // the window sum vanishes at the signal edges; floor it instead of amplifying
        let floor = 0.1 * norm.iter().cloned().fold(0.0, f64::max);
        for (o, n) in out.iter_mut().zip(&norm) {
            if floor > 0.0 {
                *o /= n.max(floor);
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Mel extraction

pub fn compute_mel(w: &Waveform, cfg: &FeatureConfig) -> Result<MelSpectrogram> {
    cfg.validate()?;
    if w.samples.len() < cfg.window_length_samples {
        return Err(SaicError::TooShort(format!(
            "{} samples is shorter than one {}-sample window",
            w.samples.len(),
            cfg.window_length_samples
        )));
    }
    let stft = Stft::new(cfg);
    let bank = MelFilterbank::new(cfg);
    let spectra = stft.analyze(&w.samples);
    let frames = spectra.len();
    let n_freq = cfg.freq_bins();
    let mut mag = Tensor::zeros(n_freq, frames);
    for (t, spec) in spectra.iter().enumerate() {
        for (k, c) in spec.iter().enumerate() {
            mag.set(k, t, c.norm());
        }
    }
    let floor = cfg.log_floor;
    let values = bank.weights.matmul(&mag).map(|e| e.max(floor).ln());
    Ok(MelSpectrogram {
        values,
        config_fingerprint: cfg.fingerprint(),
        floor_value: cfg.floor_value(),
    })
}

/// Per-mel-bin statistics over a training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl MelStats {
    pub const STD_FLOOR: f64 = 1e-4;

    pub fn identity(bins: usize) -> Self {
        Self {
            mean: vec![0.0; bins],
            std: vec![1.0; bins],
        }
    }

    /// Pools every frame of every spectrogram.
    pub fn from_mels<'m>(mels: impl IntoIterator<Item = &'m MelSpectrogram>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for m in mels {
            if sum.is_empty() {
                sum = vec![0.0; m.mel_bins()];
                sq = vec![0.0; m.mel_bins()];
            } else if sum.len() != m.mel_bins() {
                return Err(SaicError::Shape("mel bin count differs across inputs".into()));
            }
            for r in 0..m.mel_bins() {
                for &v in m.values.row(r) {
                    sum[r] += v;
                    sq[r] += v * v;
                }
            }
            count += m.frames();
        }
        if count == 0 {
            return Err(SaicError::TooShort("no frames to compute statistics from".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(Self::STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    fn check(&self, bins: usize) -> Result<()> {
        if self.mean.len() != bins || self.std.len() != bins {
            return Err(SaicError::Shape(format!(
                "stats cover {} bins, spectrogram has {bins}",
                self.mean.len()
            )));
        }
        Ok(())
    }
}

pub fn normalize_mel(m: &MelSpectrogram, stats: &MelStats) -> Result<MelSpectrogram> {
    stats.check(m.mel_bins())?;
    let mut out = m.clone();
    for r in 0..m.mel_bins() {
        let (mu, sd) = (stats.mean[r], stats.std[r].max(MelStats::STD_FLOOR));
        out.values.row_mut(r).iter_mut().for_each(|v| *v = (*v - mu) / sd);
    }
    Ok(out)
}

/// Inverse of [`normalize_mel`]: `x · std + mean`.
pub fn denormalize_mel(m: &MelSpectrogram, stats: &MelStats) -> Result<MelSpectrogram> {
    stats.check(m.mel_bins())?;
    let mut out = m.clone();
    for r in 0..m.mel_bins() {
        let (mu, sd) = (stats.mean[r], stats.std[r].max(MelStats::STD_FLOOR));
        out.values.row_mut(r).iter_mut().for_each(|v| *v = *v * sd + mu);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropPolicy {
    Random(u64),
    Center,
    Start,
}

/// Fixed-length window of frames; short inputs are right-padded with the floor value.
pub fn crop_or_pad(m: &MelSpectrogram, frames_per_crop: usize, policy: CropPolicy) -> MelSpectrogram {
    let frames = m.frames();
    let bins = m.mel_bins();
    let values = if frames >= frames_per_crop {
        let slack = frames - frames_per_crop;
        let offset = match policy {
            CropPolicy::Start => 0,
            CropPolicy::Center => slack / 2,
            CropPolicy::Random(seed) => ChaCha8Rng::seed_from_u64(seed).random_range(0..=slack),
        };
        m.values.cols_range(offset, frames_per_crop)
    } else {
        let mut v = Tensor::filled(bins, frames_per_crop, m.floor_value);
        for r in 0..bins {
            v.row_mut(r)[..frames].copy_from_slice(m.values.row(r));
        }
        v
    };
    MelSpectrogram {
        values,
        config_fingerprint: m.config_fingerprint.clone(),
        floor_value: m.floor_value,
    }
}

// ---------------------------------------------------------------------------
// Inversion

const NNLS_ITERATIONS: usize = 30;

/// Griffin–Lim reconstruction without the final peak normalization.
pub fn mel_to_waveform_raw(m: &MelSpectrogram, cfg: &FeatureConfig, iterations: usize) -> Result<Waveform> {
    let fp = cfg.fingerprint();
    if m.config_fingerprint != fp {
        return Err(SaicError::FingerprintMismatch {
            expected: fp,
            found: m.config_fingerprint.clone(),
        });
    }
    let bank = MelFilterbank::new(cfg);
    let energy = m.values.map(|v| v.exp());
    let lin = bank.invert(&energy, NNLS_ITERATIONS);
    let stft = Stft::new(cfg);
    let frames = m.frames();
    let n_freq = cfg.freq_bins();
    let mags: Vec<Vec<f64>> = (0..frames)
        .map(|t| (0..n_freq).map(|k| lin.get(k, t)).collect())
        .collect();

    let mut spectra: Vec<Vec<Complex<f64>>> = mags
        .iter()
        .map(|row| row.iter().map(|&a| Complex::new(a, 0.0)).collect())
        .collect();
    for _ in 0..iterations {
        let signal = stft.synthesize(&spectra);
        let estimate = stft.analyze(&signal);
        for ((spec, est), mag) in spectra.iter_mut().zip(&estimate).zip(&mags) {
            for ((s, e), &a) in spec.iter_mut().zip(est).zip(mag) {
                let n = e.norm();
                *s = if n > 1e-12 { e * (a / n) } else { Complex::new(a, 0.0) };
            }
        }
    }
    let samples = stft.synthesize(&spectra);
    Ok(Waveform {
        samples,
        sample_rate_hz: cfg.sample_rate_hz,
    })
}

/// Griffin–Lim reconstruction, peak-normalized.
pub fn mel_to_waveform(m: &MelSpectrogram, cfg: &FeatureConfig, iterations: usize) -> Result<Waveform> {
    let mut w = mel_to_waveform_raw(m, cfg, iterations)?;
    peak_normalize(&mut w.samples);
    Ok(w)
}

// ---------------------------------------------------------------------------
// Pitch

/// Median autocorrelation pitch over voiced frames, or `None` for silence.
///
/// Per frame the shortest lag whose normalized autocorrelation reaches 90% of
/// the frame maximum wins, which suppresses sub-octave picks.
pub fn estimate_f0(samples: &[f64], sample_rate: u32, fmin_hz: f64, fmax_hz: f64) -> Option<f64> {
    let sr = sample_rate as f64;
    let min_lag = (sr / fmax_hz).floor().max(1.0) as usize;
    let max_lag = (sr / fmin_hz).ceil() as usize;
    let frame = (3 * max_lag).max(1024);
    let hop = frame / 2;
    if samples.len() < frame + max_lag {
        return None;
    }
    let global_energy = samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64;
    let mut picks = Vec::new();
    let mut start = 0;
    while start + frame + max_lag <= samples.len() {
        let x = &samples[start..start + frame];
        let energy: f64 = x.iter().map(|s| s * s).sum();
        if energy / frame as f64 > 0.1 * global_energy && energy > 0.0 {
            let scores: Vec<f64> = (min_lag..=max_lag)
                .map(|lag| {
                    let y = &samples[start + lag..start + lag + frame];
                    let num: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
                    let ey: f64 = y.iter().map(|s| s * s).sum();
                    num / (energy * ey).sqrt().max(1e-12)
                })
                .collect();
            let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if best > 0.3 {
                let threshold = 0.9 * best;
                // first local peak above threshold
                let idx = (0..scores.len())
                    .find(|&i| {
                        scores[i] >= threshold
                            && (i == 0 || scores[i] >= scores[i - 1])
                            && (i + 1 == scores.len() || scores[i] >= scores[i + 1])
                    })
                    .unwrap_or(0);
                let lag = refine_peak(&scores, idx) + min_lag as f64;
                picks.push(sr / lag);
            }
        }
        start += hop;
    }
    if picks.is_empty() {
        return None;
    }
    picks.sort_by(|a, b| a.total_cmp(b));
    Some(picks[picks.len() / 2])
}

fn refine_peak(scores: &[f64], i: usize) -> f64 {
    if i == 0 || i + 1 >= scores.len() {
        return i as f64;
    }
    let (a, b, c) = (scores[i - 1], scores[i], scores[i + 1]);
    let denom = a - 2.0 * b + c;
    if denom.abs() < 1e-12 {
        i as f64
    } else {
        i as f64 + 0.5 * (a - c) / denom
    }
}

// ---------------------------------------------------------------------------
// Tensor files and heatmaps

/// Writes `rows`, `cols` as little-endian u32 followed by row-major f32 data.
pub fn write_mel_tensor(path: &Path, values: &Tensor) -> Result<()> {
    let file = File::create(path).map_err(|e| SaicError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut bytes = Vec::with_capacity(8 + 4 * values.len());
    bytes.extend_from_slice(&(values.rows() as u32).to_le_bytes());
    bytes.extend_from_slice(&(values.cols() as u32).to_le_bytes());
    for &v in values.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.write_all(&bytes)
        .and_then(|_| out.flush())
        .map_err(|e| SaicError::io(path, e))
}

pub fn read_mel_tensor(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| SaicError::io(path, e))?;
    if bytes.len() < 8 {
        return Err(SaicError::Shape(format!("{}: missing tensor header", path.display())));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != rows * cols * 4 {
        return Err(SaicError::Shape(format!(
            "{}: header says {rows}x{cols}, body holds {} bytes",
            path.display(),
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::from_vec(rows, cols, data)
}

/// Side-by-side heatmaps sharing one colour scale; low frequencies at the bottom.
pub fn write_heatmap_png(path: &Path, panels: &[&Tensor]) -> Result<()> {
    const GAP: u32 = 4;
    const ZOOM: u32 = 3;
    if panels.is_empty() {
        return Err(SaicError::Shape("no panels to draw".into()));
    }
    let rows = panels.iter().map(|p| p.rows()).max().unwrap_or(0) as u32;
    let width: u32 = panels.iter().map(|p| p.cols() as u32 * ZOOM).sum::<u32>() + GAP * (panels.len() as u32 - 1);
    let height = rows * ZOOM;
    let (lo, hi) = panels
        .iter()
        .flat_map(|p| p.data().iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = (hi - lo).max(1e-12);
    let mut img = image::RgbImage::from_pixel(width.max(1), height.max(1), image::Rgb([255, 255, 255]));
    let mut x0 = 0;
    for p in panels {
        for r in 0..p.rows() as u32 {
            for c in 0..p.cols() as u32 {
                let v = (p.get(r as usize, c as usize) - lo) / span;
                let px = colormap(v);
                for dy in 0..ZOOM {
                    for dx in 0..ZOOM {
                        img.put_pixel(x0 + c * ZOOM + dx, height - 1 - (r * ZOOM + dy), px);
                    }
                }
            }
        }
        x0 += p.cols() as u32 * ZOOM + GAP;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| SaicError::Audio(format!("{}: {e}", path.display())))
}

fn colormap(v: f64) -> image::Rgb<u8> {
    // piecewise-linear approximation of viridis
    const STOPS: [[f64; 3]; 5] = [
        [68.0, 1.0, 84.0],
        [59.0, 82.0, 139.0],
        [33.0, 145.0, 140.0],
        [94.0, 201.0, 98.0],
        [253.0, 231.0, 37.0],
    ];
    let x = v.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f64;
    let c = |k: usize| (STOPS[i][k] * (1.0 - f) + STOPS[i + 1][k] * f).round() as u8;
    image::Rgb([c(0), c(1), c(2)])
}
