//! Training objectives and a finite-difference gradient checker.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::dataset::Example;
use crate::error::{Result, SaicError};
use crate::model::{ContentEncoder, Conv1d, FusionDecoder, Parameters, SpeakerEncoder};
use crate::tensor::Tensor;
use crate::training::LatentTables;

// ---------------------------------------------------------------------------
// Perceptual distance

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerceptualConfig {
    pub layers: usize,
    pub channels: usize,
    pub kernel: usize,
    pub seed: u64,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            channels: 32,
            kernel: 3,
            seed: 7,
        }
    }
}

/// A frozen, randomly initialized convolution stack used as a feature
/// extractor for the reconstruction distance. Never trained.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualNet {
    pub cfg: PerceptualConfig,
    layers: Vec<Conv1d>,
    pub layer_weights: Vec<f64>,
    pub raw_weight: f64,
}

impl PerceptualNet {
    pub fn new(mel_bins: usize, cfg: &PerceptualConfig) -> Result<Self> {
        if cfg.layers == 0 {
            return Err(SaicError::config("perceptual.layers", "must be >= 1"));
        }
        if cfg.channels == 0 || cfg.kernel % 2 == 0 {
            return Err(SaicError::config("perceptual", "channels must be positive and kernel odd"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let layers = (0..cfg.layers)
            .map(|l| {
                let input = if l == 0 { mel_bins } else { cfg.channels };
                Conv1d::new(input, cfg.channels, cfg.kernel, &mut rng)
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            layers,
            layer_weights: vec![1.0; cfg.layers],
            raw_weight: 1.0,
        })
    }

    pub fn mel_bins(&self) -> usize {
        self.layers[0].in_channels()
    }

    fn features<'a>(&'a self, g: &mut Graph<'a>, x: NodeId) -> Vec<NodeId> {
        let mut h = x;
        self.layers
            .iter()
            .map(|conv| {
                let y = conv.forward(g, h, false);
                h = g.relu(y);
                h
            })
            .collect()
    }

    /// Records the distance between `a` and `b` on `g`, returning a scalar node.
    pub fn distance_node<'a>(&'a self, g: &mut Graph<'a>, a: NodeId, b: NodeId) -> NodeId {
        let raw = g.l1_mean(a, b);
        let mut total = g.scale(raw, self.raw_weight);
        if self.layer_weights.iter().all(|&w| w == 0.0) {
            return total;
        }
        let fa = self.features(g, a);
        let fb = self.features(g, b);
        for ((&w, &x), &y) in self.layer_weights.iter().zip(&fa).zip(&fb) {
            if w != 0.0 {
                let d = g.l1_mean(x, y);
                let d = g.scale(d, w);
                total = g.add(total, d);
            }
        }
        total
    }
}

pub fn perceptual_loss(net: &PerceptualNet, a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(SaicError::Shape(format!("perceptual_loss: {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.rows() != net.mel_bins() {
        return Err(SaicError::Shape(format!("perceptual_loss expects {} mel bins, got {}", net.mel_bins(), a.rows())));
    }
    let mut g = Graph::new();
    let (x, y) = (g.constant(a), g.constant(b));
    let d = net.distance_node(&mut g, x, y);
    Ok(g.value(d).item())
}

// ---------------------------------------------------------------------------
// Configs

/// What the stage-1 norm penalty acts on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyTarget {
    /// `λ‖E_c^x‖²`, a regularizer on the learned content latent.
    #[default]
    ContentLatent,
    /// `λ‖ε‖²` on the noise draw itself, which carries no gradient.
    Noise,
}

/// Update rule shared by both training stages. Adam uses `momentum` as its
/// first-moment decay.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Momentum,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub sigma: f64,
    pub lambda_noise: f64,
    pub penalty: PenaltyTarget,
    /// After every epoch, shift each speaker's content latents onto the
    /// global mean so no speaker has its own content offset.
    pub center_content_by_speaker: bool,
    pub lr_latent: f64,
    pub lr_network: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            sigma: 0.3,
            lambda_noise: 1e-3,
            penalty: PenaltyTarget::ContentLatent,
            center_content_by_speaker: false,
            lr_latent: 0.05,
            lr_network: 0.005,
            optimizer: OptimizerKind::Momentum,
            momentum: 0.9,
            epochs: 100,
            batch_size: 16,
            seed: 1,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(SaicError::config(format!("stage1.{f}"), m));
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad("sigma", "must be finite and >= 0");
        }
        if !(self.lambda_noise >= 0.0 && self.lambda_noise.is_finite()) {
            return bad("lambda_noise", "must be finite and >= 0");
        }
        validate_optim("stage1", self.lr_latent, "lr_latent")?;
        validate_optim("stage1", self.lr_network, "lr_network")?;
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub lambda_1: f64,
    pub lambda_2: f64,
    pub lambda_3: f64,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub finetune_decoder: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            lambda_1: 1.0,
            lambda_2: 1.0,
            lambda_3: 1.0,
            lr: 0.005,
            optimizer: OptimizerKind::Momentum,
            momentum: 0.9,
            epochs: 100,
            batch_size: 16,
            seed: 2,
            finetune_decoder: true,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_1, self.lambda_2, self.lambda_3];
        for (i, l) in lambdas.iter().enumerate() {
            if !(*l >= 0.0 && l.is_finite()) {
                return Err(SaicError::config(format!("stage2.lambda_{}", i + 1), "must be finite and >= 0"));
            }
        }
        if lambdas.iter().all(|&l| l == 0.0) {
            return Err(SaicError::config("stage2.lambda_1", "at least one loss weight must be positive"));
        }
        validate_optim("stage2", self.lr, "lr")?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(SaicError::config("stage2.momentum", "must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(SaicError::config("stage2.batch_size", "must be >= 1"));
        }
        Ok(())
    }
}

fn validate_optim(section: &str, lr: f64, name: &str) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(SaicError::config(format!("{section}.{name}"), "must be finite and > 0"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Stage 1

/// Value and gradients of the stage-1 objective over one batch.
#[derive(Clone, Debug)]
pub struct Stage1Eval {
    pub loss: f64,
    /// Batch mean of the perceptual reconstruction term alone.
    pub reconstruction: f64,
    pub penalty: f64,
    /// In the decoder's parameter order.
    pub decoder_grads: Vec<Tensor>,
    /// `(row, gradient column)` for each content-table row touched.
    pub content_grads: Vec<(usize, Tensor)>,
    pub speaker_grads: Vec<(usize, Tensor)>,
}

/// One `N(0, σ²I)` draw of dimension `dim` per batch item.
pub fn draw_noise(batch: usize, dim: usize, sigma: f64, rng: &mut impl Rng) -> Vec<Tensor> {
    (0..batch)
        .map(|_| {
            Tensor::column(
                (0..dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        sigma * z
                    })
                    .collect(),
            )
        })
        .collect()
}

pub fn stage1_loss(
    net: &PerceptualNet,
    decoder: &FusionDecoder,
    latents: &LatentTables,
    batch: &[&Example],
    cfg: &Stage1Config,
    noise: &[Tensor],
) -> Result<Stage1Eval> {
    if batch.is_empty() {
        return Err(SaicError::Shape("stage1_loss on an empty batch".into()));
    }
    if noise.len() != batch.len() {
        return Err(SaicError::Shape(format!("{} noise draws for {} batch items", noise.len(), batch.len())));
    }
    for ex in batch {
        if ex.utterance >= latents.content.rows() {
            return Err(SaicError::IndexOutOfRange(format!(
                "utterance row {} (table has {})",
                ex.utterance,
                latents.content.rows()
            )));
        }
        if ex.speaker >= latents.speaker.rows() {
            return Err(SaicError::IndexOutOfRange(format!(
                "speaker row {} (table has {})",
                ex.speaker,
                latents.speaker.rows()
            )));
        }
    }

    let mut g = Graph::new();
    let mut content_nodes: BTreeMap<usize, NodeId> = BTreeMap::new();
    let mut speaker_nodes: BTreeMap<usize, NodeId> = BTreeMap::new();
    let n = batch.len() as f64;
    let mut recon_nodes = Vec::with_capacity(batch.len());
    let mut penalty_total = 0.0;
    let mut penalty_nodes = Vec::new();

    for (ex, eps) in batch.iter().zip(noise) {
        let c = *content_nodes
            .entry(ex.utterance)
            .or_insert_with(|| g.leaf(latents.content_row(ex.utterance), true));
        let s = *speaker_nodes
            .entry(ex.speaker)
            .or_insert_with(|| g.leaf(latents.speaker_row(ex.speaker), true));
        let e = g.constant(eps);
        let noisy = g.add(c, e);
        let out = decoder.forward(&mut g, s, noisy, true);
        let target = g.constant(&ex.crop.values);
        recon_nodes.push(net.distance_node(&mut g, out, target));

        if cfg.lambda_noise != 0.0 {
            match cfg.penalty {
                PenaltyTarget::ContentLatent => {
                    let sq = g.sum_squares(c);
                    penalty_total += g.value(sq).item();
                    penalty_nodes.push(sq);
                }
                PenaltyTarget::Noise => penalty_total += eps.squared_norm(),
            }
        }
    }

    let mut recon = recon_nodes[0];
    for &r in &recon_nodes[1..] {
        recon = g.add(recon, r);
    }
    let reconstruction = g.value(recon).item() / n;
    let mut total = g.scale(recon, 1.0 / n);
    for p in penalty_nodes {
        let w = g.scale(p, cfg.lambda_noise / n);
        total = g.add(total, w);
    }
    let penalty = cfg.lambda_noise * penalty_total / n;
    let loss = reconstruction + penalty;
    if !loss.is_finite() {
        return Err(SaicError::NonFiniteLoss {
            context: format!("stage-1 batch of utterances {:?}", content_nodes.keys().collect::<Vec<_>>()),
        });
    }

    let mut grads = g.backward(total);
    let decoder_grads = decoder.collect_grads(&g, &grads);
    let mut take = |nodes: BTreeMap<usize, NodeId>, rows: usize| -> Vec<(usize, Tensor)> {
        nodes
            .into_iter()
            .map(|(r, id)| (r, grads.take(id).unwrap_or_else(|| Tensor::zeros(rows, 1))))
            .collect()
    };
    let content_grads = take(content_nodes, latents.content.cols());
    let speaker_grads = take(speaker_nodes, latents.speaker.cols());
    Ok(Stage1Eval {
        loss,
        reconstruction,
        penalty,
        decoder_grads,
        content_grads,
        speaker_grads,
    })
}

// ---------------------------------------------------------------------------
// Stage 2

/// `(‖e_cx − e_cz‖², ‖e_sx − e_sz‖²)` for one pair.
pub fn embedding_losses(e_cx: &Tensor, e_cz: &Tensor, e_sx: &Tensor, e_sz: &Tensor) -> Result<(f64, f64)> {
    let dist = |a: &Tensor, b: &Tensor, what: &str| -> Result<f64> {
        if a.shape() != b.shape() {
            return Err(SaicError::Shape(format!("{what} embeddings: {:?} vs {:?}", a.shape(), b.shape())));
        }
        Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum())
    };
    Ok((dist(e_cx, e_cz, "content")?, dist(e_sx, e_sz, "speaker")?))
}

/// Perceptual distance between `FD(e_sz, e_cz)` and `target`, without noise or penalty.
pub fn stage2_reconstruction_loss(
    net: &PerceptualNet,
    decoder: &FusionDecoder,
    e_sz: &Tensor,
    e_cz: &Tensor,
    target: &Tensor,
) -> Result<f64> {
    let out = decoder.decode(e_sz, e_cz)?;
    perceptual_loss(net, &out, target)
}

/// `λ₁L_Ec + λ₂L_Es + λ₃L_R2`.
pub fn stage2_total_loss(cfg: &Stage2Config, components: (f64, f64, f64)) -> f64 {
    cfg.lambda_1 * components.0 + cfg.lambda_2 * components.1 + cfg.lambda_3 * components.2
}

#[derive(Clone, Debug)]
pub struct Stage2Eval {
    pub loss: f64,
    /// Batch means of `L_Ec`, `L_Es`, `L_R2` (the last is 0 when `λ₃ = 0`).
    pub components: (f64, f64, f64),
    pub ce_grads: Vec<Tensor>,
    pub se_grads: Vec<Tensor>,
    /// Present only when the decoder is trainable.
    pub decoder_grads: Option<Vec<Tensor>>,
}

#[allow(clippy::too_many_arguments)]
pub fn stage2_loss(
    net: &PerceptualNet,
    ce: &ContentEncoder,
    se: &SpeakerEncoder,
    decoder: &FusionDecoder,
    latents: &LatentTables,
    batch: &[&Example],
    cfg: &Stage2Config,
) -> Result<Stage2Eval> {
    if batch.is_empty() {
        return Err(SaicError::Shape("stage2_loss on an empty batch".into()));
    }
    let n = batch.len() as f64;
    let mut g = Graph::new();
    let mut terms = Vec::new();
    let (mut lec, mut les, mut lr2) = (0.0, 0.0, 0.0);
    let mut rows = Vec::with_capacity(batch.len());
    for ex in batch {
        if ex.utterance >= latents.content.rows() || ex.speaker >= latents.speaker.rows() {
            return Err(SaicError::IndexOutOfRange(format!(
                "latent rows ({}, {}) for tables of {} / {}",
                ex.utterance,
                ex.speaker,
                latents.content.rows(),
                latents.speaker.rows()
            )));
        }
        rows.push((latents.content_row(ex.utterance), latents.speaker_row(ex.speaker)));
    }
    for (ex, (cx, sx)) in batch.iter().zip(&rows) {
        let x = g.constant(&ex.crop.values);
        let cz = ce.forward(&mut g, x, true);
        let sz = se.forward(&mut g, x, true);
        let cxn = g.constant(cx);
        let sxn = g.constant(sx);
        let dc = g.squared_distance(cxn, cz);
        let ds = g.squared_distance(sxn, sz);
        lec += g.value(dc).item();
        les += g.value(ds).item();
        if cfg.lambda_1 != 0.0 {
            terms.push(g.scale(dc, cfg.lambda_1 / n));
        }
        if cfg.lambda_2 != 0.0 {
            terms.push(g.scale(ds, cfg.lambda_2 / n));
        }
        if cfg.lambda_3 != 0.0 {
            let out = decoder.forward(&mut g, sz, cz, cfg.finetune_decoder);
            let d = net.distance_node(&mut g, out, x);
            lr2 += g.value(d).item();
            terms.push(g.scale(d, cfg.lambda_3 / n));
        }
    }
    let components = (lec / n, les / n, lr2 / n);
    let loss = stage2_total_loss(cfg, components);
    if !loss.is_finite() {
        let ids: Vec<usize> = batch.iter().map(|e| e.utterance).collect();
        return Err(SaicError::NonFiniteLoss {
            context: format!("stage-2 batch of utterances {ids:?}"),
        });
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t);
    }
    let grads = g.backward(total);
    Ok(Stage2Eval {
        loss,
        components,
        ce_grads: ce.collect_grads(&g, &grads),
        se_grads: se.collect_grads(&g, &grads),
        decoder_grads: cfg.finetune_decoder.then(|| decoder.collect_grads(&g, &grads)),
    })
}

// ---------------------------------------------------------------------------
// Gradient checking

/// Maximum relative error between analytic and central-difference gradients
/// over `probes` distinct random coordinates. `loss_fn` returns the loss and
/// its full analytic gradient at the given point.
pub fn grad_check<F>(mut loss_fn: F, params: &[f64], epsilon: f64, probes: usize, seed: u64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(SaicError::config("grad_check.epsilon", "must lie in [1e-7, 1e-3]"));
    }
    if params.is_empty() {
        return Err(SaicError::Shape("grad_check needs at least one parameter".into()));
    }
    let (base, analytic) = loss_fn(params)?;
    if !base.is_finite() {
        return Err(SaicError::NonFiniteLoss {
            context: "grad_check base point".into(),
        });
    }
    if analytic.len() != params.len() {
        return Err(SaicError::Shape(format!("{} gradients for {} parameters", analytic.len(), params.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = sample(&mut rng, params.len(), probes.min(params.len()));
    let mut x = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in coords {
        let orig = x[i];
        x[i] = orig + epsilon;
        let (plus, _) = loss_fn(&x)?;
        x[i] = orig - epsilon;
        let (minus, _) = loss_fn(&x)?;
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(SaicError::NonFiniteLoss {
                context: format!("grad_check probe at coordinate {i}"),
            });
        }
        let fd = (plus - minus) / (2.0 * epsilon);
        let a = analytic[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::examples_from_crops;
    use crate::model::{init_networks, ModelConfig};
    use crate::training::init_latent_tables;

    fn tiny() -> ModelConfig {
        ModelConfig {
            mel_bins: 5,
            frames: 6,
            hidden: 4,
            kernel: 3,
            content_dim: 3,
            speaker_dim: 3,
            decoder_layers: 2,
        }
    }

    fn small_net(bins: usize) -> PerceptualNet {
        PerceptualNet::new(
            bins,
            &PerceptualConfig {
                layers: 2,
                channels: 4,
                kernel: 3,
                seed: 3,
            },
        )
        .unwrap()
    }

    fn rand_tensor(r: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn examples(cfg: &ModelConfig) -> Vec<Example> {
        examples_from_crops(
            vec![
                (0, rand_tensor(cfg.mel_bins, cfg.frames, 1)),
                (1, rand_tensor(cfg.mel_bins, cfg.frames, 2)),
                (0, rand_tensor(cfg.mel_bins, cfg.frames, 3)),
            ],
            "fp",
            -11.5,
        )
    }

    #[test]
    fn perceptual_identities() {
        let net = PerceptualNet::new(4, &PerceptualConfig::default()).unwrap();
        let a = rand_tensor(4, 8, 1);
        let b = rand_tensor(4, 8, 2);
        assert_eq!(perceptual_loss(&net, &a, &a).unwrap(), 0.0);
        assert_eq!(perceptual_loss(&net, &a, &b).unwrap(), perceptual_loss(&net, &b, &a).unwrap());
        assert!(perceptual_loss(&net, &a, &b).unwrap() > 0.0);

        let mut raw_only = net.clone();
        raw_only.layer_weights = vec![0.0; 4];
        let shifted = a.map(|v| v + 0.5);
        assert!((perceptual_loss(&raw_only, &a, &shifted).unwrap() - 0.5).abs() < 1e-12);

        assert!(perceptual_loss(&net, &a, &rand_tensor(4, 7, 3)).is_err());
        assert!(PerceptualNet::new(4, &PerceptualConfig { layers: 0, ..Default::default() }).is_err());
    }

    #[test]
    fn embedding_loss_examples() {
        let a = Tensor::column(vec![1.0, 2.0, 3.0, 4.0]);
        let b = a.map(|v| v - 1.0);
        let s = Tensor::column(vec![0.5, -0.5]);
        assert_eq!(embedding_losses(&a, &a, &s, &s).unwrap(), (0.0, 0.0));
        assert_eq!(embedding_losses(&a, &b, &s, &s).unwrap().0, 4.0);
        assert_eq!(embedding_losses(&a, &b, &s, &s).unwrap(), embedding_losses(&b, &a, &s, &s).unwrap());
        assert!(embedding_losses(&a, &s, &s, &s).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let cfg = Stage2Config::default();
        assert_eq!(stage2_total_loss(&cfg, (0.5, 0.25, 0.25)), 1.0);
        let only_r = Stage2Config {
            lambda_1: 0.0,
            lambda_2: 0.0,
            ..Stage2Config::default()
        };
        assert_eq!(stage2_total_loss(&only_r, (0.7, 0.9, 0.3)), 0.3);
        assert!(only_r.validate().is_ok());
        assert!(Stage2Config {
            lambda_3: 0.0,
            ..only_r
        }
        .validate()
        .is_err());
    }

    #[test]
    fn grad_check_on_closed_forms() {
        let x: Vec<f64> = (0..20).map(|i| (i as f64 - 7.5) * 0.37).collect();
        let quad = |p: &[f64]| Ok((p.iter().map(|v| v * v).sum(), p.iter().map(|v| 2.0 * v).collect()));
        assert!(grad_check(quad, &x, 1e-5, 10, 1).unwrap() < 1e-8);
        let c: Vec<f64> = (0..20).map(|i| 0.5 + i as f64).collect();
        let lin = |p: &[f64]| Ok((p.iter().zip(&c).map(|(a, b)| a * b).sum(), c.clone()));
        assert!(grad_check(lin, &x, 1e-3, 10, 1).unwrap() < 1e-10);
        let nan = |_: &[f64]| Ok((f64::NAN, vec![0.0; 20]));
        assert!(matches!(grad_check(nan, &x, 1e-5, 3, 1), Err(SaicError::NonFiniteLoss { .. })));
        assert!(grad_check(quad, &x, 1e-2, 3, 1).is_err());
    }

    fn stage1_setup(seed: u64) -> (PerceptualNet, FusionDecoder, LatentTables, Vec<Example>) {
        let cfg = tiny();
        let (_, _, fd) = init_networks(&cfg, seed);
        let latents = init_latent_tables(3, 2, cfg.content_dim, cfg.speaker_dim, seed, "m".into());
        (small_net(cfg.mel_bins), fd, latents, examples(&cfg))
    }

    #[test]
    fn stage1_penalty_is_additive_and_linear() {
        let (net, fd, mut latents, ex) = stage1_setup(1);
        let batch = vec![&ex[0]];
        let noise = vec![Tensor::zeros(3, 1)];
        latents.content.row_mut(0).copy_from_slice(&[2.0, 0.0, 0.0]);
        let base = Stage1Config {
            sigma: 0.0,
            lambda_noise: 0.0,
            ..Default::default()
        };
        let r = stage1_loss(&net, &fd, &latents, &batch, &base, &noise).unwrap().loss;
        let one = Stage1Config { lambda_noise: 1.0, ..base.clone() };
        assert!((stage1_loss(&net, &fd, &latents, &batch, &one, &noise).unwrap().loss - (r + 4.0)).abs() < 1e-12);
        let two = Stage1Config { lambda_noise: 2.0, ..base.clone() };
        assert!((stage1_loss(&net, &fd, &latents, &batch, &two, &noise).unwrap().loss - r - 8.0).abs() < 1e-12);

        // strict mode penalizes the draw but leaves gradients unchanged
        let eps = vec![Tensor::column(vec![0.0, 1.0, 1.0])];
        let strict = Stage1Config {
            penalty: PenaltyTarget::Noise,
            ..one.clone()
        };
        let a = stage1_loss(&net, &fd, &latents, &batch, &strict, &eps).unwrap();
        let b = stage1_loss(&net, &fd, &latents, &batch, &Stage1Config { lambda_noise: 0.0, ..strict.clone() }, &eps).unwrap();
        assert!((a.loss - b.loss - 2.0).abs() < 1e-12);
        assert_eq!(a.content_grads[0].1, b.content_grads[0].1);
    }

    #[test]
    fn stage1_zero_when_decoder_reproduces_target() {
        let (net, fd, latents, mut ex) = stage1_setup(2);
        let cfg = Stage1Config {
            sigma: 0.0,
            lambda_noise: 0.0,
            ..Default::default()
        };
        ex[0].crop.values = fd.decode(&latents.speaker_row(0), &latents.content_row(0)).unwrap();
        let out = stage1_loss(&net, &fd, &latents, &[&ex[0]], &cfg, &[Tensor::zeros(3, 1)]).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn stage1_rejects_unknown_rows() {
        let (net, fd, latents, mut ex) = stage1_setup(3);
        ex[0].utterance = 9;
        let err = stage1_loss(&net, &fd, &latents, &[&ex[0]], &Stage1Config::default(), &[Tensor::zeros(3, 1)]);
        assert!(matches!(err, Err(SaicError::IndexOutOfRange(_))));
    }

    #[test]
    fn stage1_latent_gradient_matches_finite_differences() {
        let (net, fd, latents, ex) = stage1_setup(4);
        let batch: Vec<&Example> = ex.iter().collect();
        let cfg = Stage1Config::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = draw_noise(3, 3, cfg.sigma, &mut rng);
        let x0 = latents.content.row(2).to_vec();
        let f = |p: &[f64]| {
            let mut l = latents.clone();
            l.content.row_mut(2).copy_from_slice(p);
            let out = stage1_loss(&net, &fd, &l, &batch, &cfg, &noise)?;
            let g = out.content_grads.iter().find(|(r, _)| *r == 2).unwrap().1.data().to_vec();
            Ok((out.loss, g))
        };
        let err = grad_check(f, &x0, 1e-6, 3, 1).unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn stage2_zero_weight_drops_gradient() {
        let cfg = tiny();
        let (ce, se, fd) = init_networks(&cfg, 6);
        let latents = init_latent_tables(3, 2, cfg.content_dim, cfg.speaker_dim, 6, "m".into());
        let ex = examples(&cfg);
        let batch: Vec<&Example> = ex.iter().collect();
        let net = small_net(cfg.mel_bins);
        let only_speaker = Stage2Config {
            lambda_1: 0.0,
            lambda_2: 1.0,
            lambda_3: 0.0,
            ..Default::default()
        };
        let out = stage2_loss(&net, &ce, &se, &fd, &latents, &batch, &only_speaker).unwrap();
        assert!(out.ce_grads.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert!(out.decoder_grads.unwrap().iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert!(out.se_grads.iter().any(|t| t.data().iter().any(|&v| v != 0.0)));

        let frozen = Stage2Config {
            finetune_decoder: false,
            ..Default::default()
        };
        let out = stage2_loss(&net, &ce, &se, &fd, &latents, &batch, &frozen).unwrap();
        assert!(out.decoder_grads.is_none());
        let r2 = stage2_reconstruction_loss(&net, &fd, &se.encode(&ex[0].crop.values).unwrap(), &ce.encode(&ex[0].crop.values).unwrap(), &ex[0].crop.values).unwrap();
        assert!(r2 > 0.0);
    }
}
