//! Identity swap and reconstruction with frozen stage-2 networks.

use std::path::{Path, PathBuf};

use crate::error::{Result, SaicError};
use crate::features::{
    compute_mel, crop_or_pad, denormalize_mel, load_waveform, mel_to_waveform, normalize_mel, write_heatmap_png,
    write_mel_tensor, write_wav, CropPolicy, MelSpectrogram, Waveform,
};
use crate::model::{ContentEncoder, FusionDecoder, SpeakerEncoder};
use crate::tensor::Tensor;
use crate::training::{Checkpoint, Stage};

pub const GRIFFIN_LIM_ITERATIONS: usize = 32;

#[derive(Clone, Debug, Default)]
pub struct AnonymizationRequest {
    /// Utterance whose content is kept (speaker i).
    pub content_audio: PathBuf,
    /// Utterance whose voice is imposed (speaker j).
    pub identity_audio: PathBuf,
    pub out_wav: Option<PathBuf>,
    pub out_mel: Option<PathBuf>,
    /// Original / reconstructed / synthesized panels.
    pub out_heatmap: Option<PathBuf>,
}

/// Read-only view over a stage-2 checkpoint.
pub struct Anonymizer<'c> {
    ckpt: &'c Checkpoint,
    ce: &'c ContentEncoder,
    se: &'c SpeakerEncoder,
    fd: &'c FusionDecoder,
    fingerprint: String,
    digest: String,
}

impl<'c> Anonymizer<'c> {
    pub fn new(ckpt: &'c Checkpoint) -> Result<Self> {
        ckpt.require_stage(Stage::Stage2)?;
        let (ce, se) = ckpt.encoders()?;
        Ok(Self {
            ckpt,
            ce,
            se,
            fd: &ckpt.decoder,
            fingerprint: ckpt.feature.fingerprint(),
            digest: ckpt.parameter_digest(),
        })
    }

    fn frames(&self) -> usize {
        self.ckpt.feature.frames_per_crop
    }

    /// Full-length raw log-mel of an audio file under the checkpoint's feature config.
    pub fn load_mel(&self, path: &Path) -> Result<MelSpectrogram> {
        let w = load_waveform(path, self.ckpt.feature.sample_rate_hz)?;
        self.mel_of(&w)
    }

    pub fn mel_of(&self, w: &Waveform) -> Result<MelSpectrogram> {
        compute_mel(w, &self.ckpt.feature)
    }

    fn check(&self, m: &MelSpectrogram) -> Result<()> {
        if m.config_fingerprint != self.fingerprint {
            return Err(SaicError::FingerprintMismatch {
                expected: self.fingerprint.clone(),
                found: m.config_fingerprint.clone(),
            });
        }
        Ok(())
    }

    /// Splits a raw mel into normalized, floor-padded crops. The second value
    /// is the number of real frames in each crop.
    fn chunks(&self, raw: &MelSpectrogram) -> Result<Vec<(MelSpectrogram, usize)>> {
        self.check(raw)?;
        let f = self.frames();
        let total = raw.frames();
        let count = total.div_ceil(f).max(1);
        (0..count)
            .map(|k| {
                let start = k * f;
                let len = total.saturating_sub(start).min(f);
                let piece = MelSpectrogram {
                    values: raw.values.cols_range(start, len),
                    config_fingerprint: raw.config_fingerprint.clone(),
                    floor_value: raw.floor_value,
                };
                let crop = crop_or_pad(&piece, f, CropPolicy::Start);
                Ok((normalize_mel(&crop, &self.ckpt.stats)?, len))
            })
            .collect()
    }

    /// The normalized, floor-padded crops of `raw` joined in time; the
    /// reference that [`Anonymizer::reconstruct`] output aligns with.
    pub fn normalized_input(&self, raw: &MelSpectrogram) -> Result<MelSpectrogram> {
        let values = self
            .chunks(raw)?
            .into_iter()
            .map(|(c, _)| c.values)
            .reduce(|acc, c| hconcat(&acc, &c))
            .expect("at least one chunk");
        Ok(MelSpectrogram {
            values,
            config_fingerprint: self.fingerprint.clone(),
            floor_value: raw.floor_value,
        })
    }

    /// Mean speaker embedding over crops holding at least half a crop of audio.
    pub fn speaker_embedding(&self, raw: &MelSpectrogram) -> Result<Tensor> {
        let chunks = self.chunks(raw)?;
        let half = self.frames().div_ceil(2);
        let mut used: Vec<&MelSpectrogram> = chunks.iter().filter(|(_, n)| *n >= half).map(|(c, _)| c).collect();
        if used.is_empty() {
            used.push(&chunks[0].0);
        }
        let mut sum = Tensor::zeros(self.ckpt.model.speaker_dim, 1);
        for c in &used {
            sum.add_assign(&self.se.encode(&c.values)?);
        }
        sum.scale_assign(1.0 / used.len() as f64);
        Ok(sum)
    }

    pub fn content_embeddings(&self, raw: &MelSpectrogram) -> Result<Vec<Tensor>> {
        self.chunks(raw)?.iter().map(|(c, _)| self.ce.encode(&c.values)).collect()
    }

    /// Decodes each content crop with one speaker embedding, concatenated in
    /// time, clamped at the normalized floor. Output spans whole crops.
    pub fn decode(&self, speaker: &Tensor, contents: &[Tensor]) -> Result<MelSpectrogram> {
        let f = self.frames();
        let bins = self.ckpt.feature.mel_bins;
        let floor = self.ckpt.feature.floor_value();
        let stats = &self.ckpt.stats;
        let mut out = Tensor::zeros(bins, f * contents.len());
        for (k, c) in contents.iter().enumerate() {
            let piece = self.fd.decode(speaker, c)?;
            for r in 0..bins {
                let lo = (floor - stats.mean[r]) / stats.std[r].max(crate::features::MelStats::STD_FLOOR);
                for (dst, &v) in out.row_mut(r)[k * f..(k + 1) * f].iter_mut().zip(piece.row(r)) {
                    *dst = v.max(lo);
                }
            }
        }
        Ok(MelSpectrogram {
            values: out,
            config_fingerprint: self.fingerprint.clone(),
            floor_value: floor,
        })
    }

    /// `FD(SE(identity), CE(content))` in normalized space.
    pub fn swap(&self, content_raw: &MelSpectrogram, identity_raw: &MelSpectrogram) -> Result<MelSpectrogram> {
        let s = self.speaker_embedding(identity_raw)?;
        let c = self.content_embeddings(content_raw)?;
        self.decode(&s, &c)
    }

    pub fn reconstruct(&self, raw: &MelSpectrogram) -> Result<MelSpectrogram> {
        self.swap(raw, raw)
    }

    /// Single normalized crop in, single normalized crop out.
    pub fn swap_crops(&self, content: &Tensor, identity: &Tensor) -> Result<Tensor> {
        let s = self.se.encode(identity)?;
        let c = self.ce.encode(content)?;
        Ok(self.decode(&s, &[c])?.values)
    }

    /// Denormalizes and inverts to audio.
    pub fn vocode(&self, normalized: &MelSpectrogram) -> Result<Waveform> {
        let raw = denormalize_mel(normalized, &self.ckpt.stats)?;
        mel_to_waveform(&raw, &self.ckpt.feature, GRIFFIN_LIM_ITERATIONS)
    }

    /// Confirms no parameter changed since construction.
    pub fn verify_frozen(&self) -> Result<()> {
        if self.ckpt.parameter_digest() != self.digest {
            return Err(SaicError::Checkpoint("parameters changed during inference".into()));
        }
        Ok(())
    }

    pub fn parameter_digest(&self) -> &str {
        &self.digest
    }
}

/// Runs one identity swap from audio files and writes the requested outputs.
pub fn anonymize(ckpt: &Checkpoint, req: &AnonymizationRequest) -> Result<(MelSpectrogram, Waveform)> {
    let a = Anonymizer::new(ckpt)?;
    let content = a.load_mel(&req.content_audio)?;
    let identity = a.load_mel(&req.identity_audio)?;
    let synth = a.swap(&content, &identity)?;
    let wav = a.vocode(&synth)?;
    if let Some(p) = &req.out_wav {
        write_wav(p, &wav)?;
    }
    if let Some(p) = &req.out_mel {
        write_mel_tensor(p, &synth.values)?;
    }
    if let Some(p) = &req.out_heatmap {
        let recon = a.reconstruct(&content)?;
        let original = a.normalized_input(&content)?;
        write_heatmap_png(p, &[&original.values, &recon.values, &synth.values])?;
    }
    a.verify_frozen()?;
    Ok((synth, wav))
}

/// `FD(SE(mel), CE(mel))` for one audio file, normalized.
pub fn reconstruct(ckpt: &Checkpoint, audio: &Path) -> Result<MelSpectrogram> {
    let a = Anonymizer::new(ckpt)?;
    let mel = a.load_mel(audio)?;
    a.reconstruct(&mel)
}

fn hconcat(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.rows(), a.cols() + b.cols());
    for r in 0..a.rows() {
        out.row_mut(r)[..a.cols()].copy_from_slice(a.row(r));
        out.row_mut(r)[a.cols()..].copy_from_slice(b.row(r));
    }
    out
}
