//! Two-stage training and the checkpoint container.
//!
//! Stage 1 jointly optimizes per-utterance content latents, per-speaker
//! latents and the fusion decoder. Stage 2 fits the two encoders to those
//! latents while the decoder is either fine-tuned or held fixed.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{batch_iter, Example, Manifest, PreparedData, Split};
use crate::error::{Result, SaicError};
use crate::features::{FeatureConfig, MelStats};
use crate::losses::{
    draw_noise, stage1_loss, stage2_loss, OptimizerKind, PerceptualConfig, PerceptualNet, Stage1Config, Stage2Config,
};
use crate::model::{init_networks, ContentEncoder, FusionDecoder, ModelConfig, Parameters, SpeakerEncoder};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Latent tables

/// Stage-1 embedding tables: one content row per train utterance and one
/// speaker row per speaker.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTables {
    pub content: Tensor,
    pub speaker: Tensor,
    pub manifest_fingerprint: String,
}

impl LatentTables {
    pub fn content_row(&self, i: usize) -> Tensor {
        Tensor::column(self.content.row(i).to_vec())
    }

    pub fn speaker_row(&self, i: usize) -> Tensor {
        Tensor::column(self.speaker.row(i).to_vec())
    }

    pub fn is_finite(&self) -> bool {
        self.content.is_finite() && self.speaker.is_finite()
    }
}

/// Rows drawn i.i.d. from `N(0, 1/d)`.
pub fn init_latent_tables(
    utterances: usize,
    speakers: usize,
    content_dim: usize,
    speaker_dim: usize,
    seed: u64,
    manifest_fingerprint: String,
) -> LatentTables {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = |rows: usize, d: usize| {
        let sd = 1.0 / (d as f64).sqrt();
        let data = (0..rows * d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                sd * z
            })
            .collect();
        Tensor::from_vec(rows, d, data).expect("shape")
    };
    let content = table(utterances, content_dim);
    let speaker = table(speakers, speaker_dim);
    LatentTables {
        content,
        speaker,
        manifest_fingerprint,
    }
}

/// Tables sized to the manifest's train split.
pub fn init_latents(m: &Manifest, content_dim: usize, speaker_dim: usize, seed: u64) -> Result<LatentTables> {
    let train = m.split_indices(Split::Train);
    if train.is_empty() {
        return Err(SaicError::Manifest("train split is empty".into()));
    }
    Ok(init_latent_tables(
        train.len(),
        m.speakers.len(),
        content_dim,
        speaker_dim,
        seed,
        m.fingerprint(),
    ))
}

// ---------------------------------------------------------------------------
// Optimizer

const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First-moment buffers are keyed by parameter name. Adam additionally keeps
/// `<name>#sq` second moments and `<name>#t` step counts (one per row for
/// latent tables, since only the rows in a batch are touched).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub velocity: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, momentum: f64) -> Self {
        Self {
            kind,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    fn buffer(&mut self, key: String, rows: usize, cols: usize) -> Tensor {
        self.velocity.remove(&key).unwrap_or_else(|| Tensor::zeros(rows, cols))
    }

    /// Updates `p` from `g`. `m`, `sq` and `t` are the moment buffers, with
    /// `sq` and `t` unused by momentum SGD.
    fn update(&self, p: &mut [f64], g: &[f64], m: &mut [f64], sq: &mut [f64], t: &mut f64, lr: f64) {
        let mu = self.momentum;
        match self.kind {
            OptimizerKind::Momentum => {
                for ((pv, mv), gv) in p.iter_mut().zip(m.iter_mut()).zip(g) {
                    *mv = mu * *mv + gv;
                    *pv -= lr * *mv;
                }
            }
            OptimizerKind::Adam => {
                *t += 1.0;
                let c1 = 1.0 - mu.powf(*t);
                let c2 = 1.0 - ADAM_BETA2.powf(*t);
                for (((pv, mv), sv), gv) in p.iter_mut().zip(m.iter_mut()).zip(sq.iter_mut()).zip(g) {
                    *mv = mu * *mv + (1.0 - mu) * gv;
                    *sv = ADAM_BETA2 * *sv + (1.0 - ADAM_BETA2) * gv * gv;
                    *pv -= lr * (*mv / c1) / ((*sv / c2).sqrt() + ADAM_EPS);
                }
            }
        }
    }

    pub fn step_params<P: Parameters>(&mut self, net: &mut P, prefix: &str, grads: &[Tensor], lr: f64) {
        let adam = self.kind == OptimizerKind::Adam;
        let mut i = 0;
        let mut updates = Vec::new();
        net.visit(prefix, &mut |name, p| updates.push((name, p.rows(), p.cols())));
        let mut bufs: Vec<(Tensor, Tensor, Tensor)> = updates
            .iter()
            .map(|(name, r, c)| {
                let m = self.buffer(name.clone(), *r, *c);
                let (sq, t) = if adam {
                    (self.buffer(format!("{name}#sq"), *r, *c), self.buffer(format!("{name}#t"), 1, 1))
                } else {
                    (Tensor::zeros(0, 0), Tensor::zeros(1, 1))
                };
                (m, sq, t)
            })
            .collect();
        let this = &*self;
        net.visit_mut(prefix, &mut |_, p| {
            let (m, sq, t) = &mut bufs[i];
            let mut steps = t.data()[0];
            this.update(p.data_mut(), grads[i].data(), m.data_mut(), sq.data_mut(), &mut steps, lr);
            t.data_mut()[0] = steps;
            i += 1;
        });
        for ((name, _, _), (m, sq, t)) in updates.into_iter().zip(bufs) {
            if adam {
                self.velocity.insert(format!("{name}#sq"), sq);
                self.velocity.insert(format!("{name}#t"), t);
            }
            self.velocity.insert(name, m);
        }
    }

    pub fn step_rows(&mut self, name: &str, table: &mut Tensor, grads: &[(usize, Tensor)], lr: f64) {
        let adam = self.kind == OptimizerKind::Adam;
        let (r, c) = (table.rows(), table.cols());
        let mut m = self.buffer(name.to_string(), r, c);
        let (mut sq, mut t) = if adam {
            (self.buffer(format!("{name}#sq"), r, c), self.buffer(format!("{name}#t"), r, 1))
        } else {
            (Tensor::zeros(r, c), Tensor::zeros(r, 1))
        };
        for (row, g) in grads {
            let mut steps = t.row(*row)[0];
            self.update(table.row_mut(*row), g.data(), m.row_mut(*row), sq.row_mut(*row), &mut steps, lr);
            t.row_mut(*row)[0] = steps;
        }
        if adam {
            self.velocity.insert(format!("{name}#sq"), sq);
            self.velocity.insert(format!("{name}#t"), t);
        }
        self.velocity.insert(name.to_string(), m);
    }
}

// ---------------------------------------------------------------------------
// Checkpoint

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Stage1,
    Stage2,
}

impl Stage {
    fn tag(self) -> u8 {
        match self {
            Stage::Stage1 => 1,
            Stage::Stage2 => 2,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            1 => Ok(Stage::Stage1),
            2 => Ok(Stage::Stage2),
            other => Err(SaicError::Checkpoint(format!("unknown stage tag {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub loss: f64,
    /// Stage 1: `[reconstruction, penalty]`; stage 2: `[L_Ec, L_Es, L_R2]`.
    pub components: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub manifest_fingerprint: String,
    pub feature: FeatureConfig,
    pub stats: MelStats,
    pub model: ModelConfig,
    pub perceptual: PerceptualConfig,
    pub stage1: Stage1Config,
    pub stage2: Option<Stage2Config>,
    pub content_encoder: Option<ContentEncoder>,
    pub speaker_encoder: Option<SpeakerEncoder>,
    pub decoder: FusionDecoder,
    pub latents: LatentTables,
    pub optimizer: OptimizerState,
    pub log: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn require_stage(&self, expected: Stage) -> Result<()> {
        if self.stage != expected {
            return Err(SaicError::StageMismatch {
                expected: expected.name().into(),
                found: self.stage.name().into(),
            });
        }
        Ok(())
    }

    pub fn encoders(&self) -> Result<(&ContentEncoder, &SpeakerEncoder)> {
        match (&self.content_encoder, &self.speaker_encoder) {
            (Some(ce), Some(se)) => Ok((ce, se)),
            _ => Err(SaicError::StageMismatch {
                expected: Stage::Stage2.name().into(),
                found: self.stage.name().into(),
            }),
        }
    }

    /// Digest over every network parameter, in a fixed order.
    pub fn parameter_digest(&self) -> String {
        let mut h = Sha256::new();
        if let Some(ce) = &self.content_encoder {
            h.update(ce.digest());
        }
        if let Some(se) = &self.speaker_encoder {
            h.update(se.digest());
        }
        h.update(self.decoder.digest());
        crate::features::hex_prefix(&h.finalize(), 32)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SAICCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Serialize, Deserialize)]
struct Trailer {
    stage: Stage,
    manifest_fingerprint: String,
    feature: FeatureConfig,
    stats: MelStats,
    model: ModelConfig,
    perceptual: PerceptualConfig,
    stage1: Stage1Config,
    stage2: Option<Stage2Config>,
    #[serde(default)]
    optimizer: OptimizerKind,
    momentum: f64,
    log: Vec<EpochRecord>,
}

fn named_sections(c: &Checkpoint) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    if let Some(ce) = &c.content_encoder {
        out.extend(ce.named_tensors("ce"));
    }
    if let Some(se) = &c.speaker_encoder {
        out.extend(se.named_tensors("se"));
    }
    out.extend(c.decoder.named_tensors("fd"));
    out.push(("latents.content".into(), &c.latents.content));
    out.push(("latents.speaker".into(), &c.latents.speaker));
    for (name, v) in &c.optimizer.velocity {
        out.push((format!("optim.{name}"), v));
    }
    out
}

/// Encodes a checkpoint as `header ‖ body`. The header holds the magic, the
/// format version, the stage tag, the manifest fingerprint, the body length
/// and a SHA-256 of the body. The body holds tensor sections followed by a
/// JSON trailer.
pub fn encode_checkpoint(c: &Checkpoint) -> Result<Vec<u8>> {
    let mut body = Vec::new();
    let sections = named_sections(c);
    body.extend((sections.len() as u32).to_le_bytes());
    for (name, t) in sections {
        body.extend((name.len() as u32).to_le_bytes());
        body.extend(name.as_bytes());
        body.push(DTYPE_F64);
        body.extend((t.rows() as u64).to_le_bytes());
        body.extend((t.cols() as u64).to_le_bytes());
        for v in t.data() {
            body.extend(v.to_le_bytes());
        }
    }
    let trailer = Trailer {
        stage: c.stage,
        manifest_fingerprint: c.manifest_fingerprint.clone(),
        feature: c.feature.clone(),
        stats: c.stats.clone(),
        model: c.model.clone(),
        perceptual: c.perceptual.clone(),
        stage1: c.stage1.clone(),
        stage2: c.stage2.clone(),
        optimizer: c.optimizer.kind,
        momentum: c.optimizer.momentum,
        log: c.log.clone(),
    };
    let json = serde_json::to_vec(&trailer)?;
    body.extend((json.len() as u64).to_le_bytes());
    body.extend(json);

    let mut out = Vec::with_capacity(body.len() + 96);
    out.extend(CHECKPOINT_MAGIC);
    out.extend(CHECKPOINT_VERSION.to_le_bytes());
    out.push(c.stage.tag());
    let fp = c.manifest_fingerprint.as_bytes();
    out.extend((fp.len() as u16).to_le_bytes());
    out.extend(fp);
    out.extend((body.len() as u64).to_le_bytes());
    out.extend(Sha256::digest(&body));
    out.extend(body);
    Ok(out)
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(SaicError::Checksum);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if bytes.len() >= CHECKPOINT_MAGIC.len() && &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err(SaicError::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    r.take(CHECKPOINT_MAGIC.len())?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(SaicError::UnsupportedVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let stage = Stage::from_tag(r.u8()?)?;
    let fp_len = r.u16()? as usize;
    let header_fp = String::from_utf8_lossy(r.take(fp_len)?).into_owned();
    let body_len = r.u64()? as usize;
    let checksum = r.take(32)?.to_vec();
    let body = r.take(body_len)?;
    if Sha256::digest(body).as_slice() != checksum.as_slice() || r.pos != bytes.len() {
        return Err(SaicError::Checksum);
    }

    let corrupt = |m: &str| SaicError::Checkpoint(m.to_string());
    let mut b = Reader { buf: body, pos: 0 };
    let count = b.u32()? as usize;
    let mut sections: HashMap<String, Tensor> = HashMap::with_capacity(count);
    for _ in 0..count {
        let n = b.u32()? as usize;
        let name = String::from_utf8(b.take(n)?.to_vec()).map_err(|_| corrupt("section name is not UTF-8"))?;
        if b.u8()? != DTYPE_F64 {
            return Err(corrupt("unsupported tensor dtype"));
        }
        let rows = b.u64()? as usize;
        let cols = b.u64()? as usize;
        let raw = b.take(rows * cols * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        sections.insert(name, Tensor::from_vec(rows, cols, data)?);
    }
    let json_len = b.u64()? as usize;
    let trailer: Trailer = serde_json::from_slice(b.take(json_len)?)?;
    if trailer.stage != stage || trailer.manifest_fingerprint != header_fp {
        return Err(corrupt("header and metadata disagree"));
    }

    let mut fill = |net: &mut dyn FnMut(&mut dyn FnMut(String, &mut Tensor))| -> Result<()> {
        let mut err = None;
        net(&mut |name, t| {
            match sections.remove(&name) {
                Some(s) if s.shape() == t.shape() => *t = s,
                Some(s) => err = err.take().or(Some(corrupt(&format!("section {name} has shape {:?}", s.shape())))),
                None => err = err.take().or(Some(corrupt(&format!("missing section {name}")))),
            };
        });
        err.map_or(Ok(()), Err)
    };

    let model = trailer.model.clone();
    let (mut ce, mut se, mut fd) = init_networks(&model, 0);
    fill(&mut |f| fd.visit_mut("fd", f))?;
    let (content_encoder, speaker_encoder) = match stage {
        Stage::Stage2 => {
            fill(&mut |f| ce.visit_mut("ce", f))?;
            fill(&mut |f| se.visit_mut("se", f))?;
            (Some(ce), Some(se))
        }
        Stage::Stage1 => (None, None),
    };
    let mut table = |name: &str| sections.remove(name).ok_or_else(|| corrupt(&format!("missing section {name}")));
    let latents = LatentTables {
        content: table("latents.content")?,
        speaker: table("latents.speaker")?,
        manifest_fingerprint: trailer.manifest_fingerprint.clone(),
    };
    let mut velocity = BTreeMap::new();
    for (name, t) in sections {
        match name.strip_prefix("optim.") {
            Some(key) => {
                velocity.insert(key.to_string(), t);
            }
            None => return Err(corrupt(&format!("unexpected section {name}"))),
        }
    }
    Ok(Checkpoint {
        stage,
        manifest_fingerprint: trailer.manifest_fingerprint,
        feature: trailer.feature,
        stats: trailer.stats,
        model,
        perceptual: trailer.perceptual,
        stage1: trailer.stage1,
        stage2: trailer.stage2,
        content_encoder,
        speaker_encoder,
        decoder: fd,
        latents,
        optimizer: OptimizerState {
            kind: trailer.optimizer,
            momentum: trailer.momentum,
            velocity,
        },
        log: trailer.log,
    })
}

/// Writes atomically through a sibling temporary file.
pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(c)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| SaicError::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| SaicError::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| SaicError::io(&tmp, e))?;
    f.sync_all().map_err(|e| SaicError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| SaicError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| SaicError::io(path, e))?;
    decode_checkpoint(&bytes)
}

// ---------------------------------------------------------------------------
// Training loops

fn check_model_matches(model: &ModelConfig, feature: &FeatureConfig) -> Result<()> {
    model.validate()?;
    if model.mel_bins != feature.mel_bins {
        return Err(SaicError::config("model.mel_bins", format!("must equal feature.mel_bins ({})", feature.mel_bins)));
    }
    if model.frames != feature.frames_per_crop {
        return Err(SaicError::config(
            "model.frames",
            format!("must equal feature.frames_per_crop ({})", feature.frames_per_crop),
        ));
    }
    Ok(())
}

fn noise_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f_6973_6500);
    rng.set_stream(epoch as u64);
    rng
}

fn with_epoch(e: SaicError, stage: &str, epoch: usize) -> SaicError {
    match e {
        SaicError::NonFiniteLoss { context } => SaicError::NonFiniteLoss {
            context: format!("{stage} epoch {epoch}, {context}"),
        },
        other => other,
    }
}

/// Stage-1 latent optimization over the train split of `data`.
pub fn train_stage1(
    data: &PreparedData,
    model: &ModelConfig,
    perceptual: &PerceptualConfig,
    cfg: &Stage1Config,
) -> Result<Checkpoint> {
    cfg.validate()?;
    check_model_matches(model, &data.feature)?;
    let train: &[Example] = &data.train;
    if train.is_empty() {
        return Err(SaicError::Manifest("train split is empty".into()));
    }
    let net = PerceptualNet::new(model.mel_bins, perceptual)?;
    let (_, _, mut decoder) = init_networks(model, cfg.seed);
    let mut latents = init_latents(&data.manifest, model.content_dim, model.speaker_dim, cfg.seed)?;
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.momentum);
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut rng = noise_rng(cfg.seed, epoch);
        let (mut sum, mut recon, mut pen, mut n) = (0.0, 0.0, 0.0, 0usize);
        for batch in batch_iter(train, cfg.batch_size, cfg.seed, epoch as u64)? {
            let noise = draw_noise(batch.len(), model.content_dim, cfg.sigma, &mut rng);
            let out = stage1_loss(&net, &decoder, &latents, &batch, cfg, &noise).map_err(|e| with_epoch(e, "stage-1", epoch + 1))?;
            let k = batch.len();
            sum += out.loss * k as f64;
            recon += out.reconstruction * k as f64;
            pen += out.penalty * k as f64;
            n += k;
            opt.step_params(&mut decoder, "fd", &out.decoder_grads, cfg.lr_network);
            opt.step_rows("latents.content", &mut latents.content, &out.content_grads, cfg.lr_latent);
            opt.step_rows("latents.speaker", &mut latents.speaker, &out.speaker_grads, cfg.lr_latent);
        }
        if cfg.center_content_by_speaker {
            center_content_by_speaker(&mut latents.content, train);
        }
        let nf = n as f64;
        log::info!("stage-1 epoch {}/{}: loss {:.5} (reconstruction {:.5})", epoch + 1, cfg.epochs, sum / nf, recon / nf);
        log.push(EpochRecord {
            stage: Stage::Stage1,
            epoch: epoch + 1,
            loss: sum / nf,
            components: vec![recon / nf, pen / nf],
        });
    }
    if !latents.is_finite() {
        return Err(SaicError::NonFiniteLoss {
            context: "stage-1 latent tables after training".into(),
        });
    }
    Ok(Checkpoint {
        stage: Stage::Stage1,
        manifest_fingerprint: data.manifest.fingerprint(),
        feature: data.feature.clone(),
        stats: data.stats.clone(),
        model: model.clone(),
        perceptual: perceptual.clone(),
        stage1: cfg.clone(),
        stage2: None,
        content_encoder: None,
        speaker_encoder: None,
        decoder,
        latents,
        optimizer: opt,
        log,
    })
}

/// Shifts each speaker's content latents so every speaker shares the global
/// mean content latent.
pub fn center_content_by_speaker(content: &mut Tensor, train: &[Example]) {
    let d = content.cols();
    let speakers = train.iter().map(|e| e.speaker + 1).max().unwrap_or(0);
    let mut sums = vec![vec![0.0; d]; speakers];
    let mut counts = vec![0usize; speakers];
    let mut global = vec![0.0; d];
    for e in train {
        for (j, v) in content.row(e.utterance).iter().enumerate() {
            sums[e.speaker][j] += v;
            global[j] += v;
        }
        counts[e.speaker] += 1;
    }
    global.iter_mut().for_each(|g| *g /= train.len() as f64);
    for e in train {
        let n = counts[e.speaker] as f64;
        for (j, v) in content.row_mut(e.utterance).iter_mut().enumerate() {
            *v += global[j] - sums[e.speaker][j] / n;
        }
    }
}

/// Stage-2 encoder training against the latent tables of `stage1`.
pub fn train_stage2(data: &PreparedData, stage1: &Checkpoint, cfg: &Stage2Config) -> Result<Checkpoint> {
    cfg.validate()?;
    stage1.require_stage(Stage::Stage1)?;
    let fp = data.manifest.fingerprint();
    if stage1.manifest_fingerprint != fp {
        return Err(SaicError::FingerprintMismatch {
            expected: fp,
            found: stage1.manifest_fingerprint.clone(),
        });
    }
    let model = &stage1.model;
    check_model_matches(model, &data.feature)?;
    let train: &[Example] = &data.train;
    if train.len() != stage1.latents.content.rows() {
        return Err(SaicError::Shape(format!(
            "{} train utterances but {} content latents",
            train.len(),
            stage1.latents.content.rows()
        )));
    }
    let net = PerceptualNet::new(model.mel_bins, &stage1.perceptual)?;
    let (mut ce, mut se, _) = init_networks(model, cfg.seed);
    let mut decoder = stage1.decoder.clone();
    let latents = &stage1.latents;
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.momentum);
    let mut log = stage1.log.clone();

    for epoch in 0..cfg.epochs {
        let (mut sum, mut comps, mut n) = (0.0, [0.0; 3], 0usize);
        for batch in batch_iter(train, cfg.batch_size, cfg.seed, epoch as u64)? {
            let out = stage2_loss(&net, &ce, &se, &decoder, latents, &batch, cfg).map_err(|e| with_epoch(e, "stage-2", epoch + 1))?;
            let k = batch.len() as f64;
            sum += out.loss * k;
            comps[0] += out.components.0 * k;
            comps[1] += out.components.1 * k;
            comps[2] += out.components.2 * k;
            n += batch.len();
            opt.step_params(&mut ce, "ce", &out.ce_grads, cfg.lr);
            opt.step_params(&mut se, "se", &out.se_grads, cfg.lr);
            if let Some(g) = &out.decoder_grads {
                opt.step_params(&mut decoder, "fd", g, cfg.lr);
            }
        }
        let nf = n as f64;
        log::info!(
            "stage-2 epoch {}/{}: loss {:.5} (L_Ec {:.5}, L_Es {:.5}, L_R2 {:.5})",
            epoch + 1,
            cfg.epochs,
            sum / nf,
            comps[0] / nf,
            comps[1] / nf,
            comps[2] / nf
        );
        log.push(EpochRecord {
            stage: Stage::Stage2,
            epoch: epoch + 1,
            loss: sum / nf,
            components: comps.iter().map(|c| c / nf).collect(),
        });
    }
    Ok(Checkpoint {
        stage: Stage::Stage2,
        manifest_fingerprint: fp,
        feature: stage1.feature.clone(),
        stats: stage1.stats.clone(),
        model: model.clone(),
        perceptual: stage1.perceptual.clone(),
        stage1: stage1.stage1.clone(),
        stage2: Some(cfg.clone()),
        content_encoder: Some(ce),
        speaker_encoder: Some(se),
        decoder,
        latents: stage1.latents.clone(),
        optimizer: opt,
        log,
    })
}
