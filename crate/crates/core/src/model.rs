//! Content Encoder, Speaker Encoder and Fusion Decoder.
//!
//! All convolutions are 1-D over time with mel bins (or hidden units) as
//! channels. Networks are plain parameter records; their forward passes are
//! recorded on an [`autodiff::Graph`] so the same code serves inference and
//! training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{instance_norm_forward, Gradients, Graph, NodeId};
use crate::error::{Result, SaicError};
use crate::features::hex_prefix;
use crate::tensor::Tensor;

pub const RESIDUAL_BLOCKS: usize = 6;
pub const SPEAKER_DENSE_LAYERS: usize = 2;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub mel_bins: usize,
    pub frames: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub content_dim: usize,
    pub speaker_dim: usize,
    /// Convolution + AdaIN layers in the decoder's content branch.
    pub decoder_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mel_bins: 80,
            frames: 64,
            hidden: 128,
            kernel: 5,
            content_dim: 64,
            speaker_dim: 64,
            decoder_layers: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |f: &str, m: &str| Err(SaicError::config(format!("model.{f}"), m));
        for (name, v) in [
            ("mel_bins", self.mel_bins),
            ("frames", self.frames),
            ("hidden", self.hidden),
            ("content_dim", self.content_dim),
            ("speaker_dim", self.speaker_dim),
            ("decoder_layers", self.decoder_layers),
        ] {
            if v == 0 {
                return err(name, "must be positive");
            }
        }
        if self.kernel % 2 == 0 {
            return err("kernel", "must be odd");
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Parameter plumbing

/// Uniform visitation of every tensor in a parameter record, in a fixed order.
pub trait Parameters {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    fn named_tensors(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |n, t| out.push((n, t)));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit("", &mut |_, t| out.extend_from_slice(t.data()));
        out
    }

    /// Inverse of [`Parameters::flatten`]; returns the number of values consumed.
    fn assign_flat(&mut self, values: &[f64]) -> usize {
        let mut pos = 0;
        self.visit_mut("", &mut |_, t| {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[pos..pos + n]);
            pos += n;
        });
        pos
    }

    /// SHA-256 over names, shapes and exact bit patterns.
    fn digest(&self) -> String {
        let mut h = Sha256::new();
        self.visit("", &mut |n, t| {
            h.update(n.as_bytes());
            h.update((t.rows() as u64).to_le_bytes());
            h.update((t.cols() as u64).to_le_bytes());
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        });
        hex_prefix(&h.finalize(), 32)
    }

    /// Gradients for every tensor (zeros where the graph did not reach it), in visit order.
    fn collect_grads(&self, g: &Graph, grads: &Gradients) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit("", &mut |_, t| {
            let grad = g
                .param_node(t)
                .and_then(|id| grads.get(id))
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()));
            out.push(grad);
        });
        out
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Registers `t` as a parameter when `trainable`, else as a constant.
pub fn bind<'a>(g: &mut Graph<'a>, t: &'a Tensor, trainable: bool) -> NodeId {
    if trainable {
        g.param(t)
    } else {
        g.constant(t)
    }
}

fn he_uniform(rows: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let data = (0..rows * fan_in).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_vec(rows, fan_in, data).expect("shape")
}

/// Output projections start small so initial embeddings sit near the origin,
/// where the stage-1 latents live.
fn small_linear(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Linear {
    let mut l = Linear::new(input, output, rng);
    l.weight.scale_assign(0.1);
    l
}

// ---------------------------------------------------------------------------
// Layers

/// Same-padded 1-D convolution; `weight` is `out × (in · kernel)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub kernel: usize,
}

impl Conv1d {
    pub fn new(input: usize, output: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: he_uniform(output, input * kernel, rng),
            bias: Tensor::zeros(output, 1),
            kernel,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.cols() / self.kernel
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, x: NodeId, trainable: bool) -> NodeId {
        let cols = if self.kernel == 1 { x } else { g.im2col(x, self.kernel) };
        let w = bind(g, &self.weight, trainable);
        let b = bind(g, &self.bias, trainable);
        let y = g.matmul(w, cols);
        g.add_bias(y, b)
    }
}

impl Parameters for Conv1d {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Dense layer on a column vector; `weight` is `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: he_uniform(output, input, rng),
            bias: Tensor::zeros(output, 1),
        }
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, x: NodeId, trainable: bool) -> NodeId {
        let w = bind(g, &self.weight, trainable);
        let b = bind(g, &self.bias, trainable);
        let y = g.matmul(w, x);
        g.add_bias(y, b)
    }
}

impl Parameters for Linear {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// `relu(x + IN(conv2(relu(IN(conv1(x))))))`, instance norms optional.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub conv1: Conv1d,
    pub conv2: Conv1d,
    pub instance_norm: bool,
}

impl ResidualBlock {
    pub fn new(width: usize, kernel: usize, instance_norm: bool, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: Conv1d::new(width, width, kernel, rng),
            conv2: Conv1d::new(width, width, kernel, rng),
            instance_norm,
        }
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, x: NodeId, trainable: bool) -> NodeId {
        let mut h = self.conv1.forward(g, x, trainable);
        if self.instance_norm {
            h = g.instance_norm(h, NORM_EPS);
        }
        h = g.relu(h);
        h = self.conv2.forward(g, h, trainable);
        if self.instance_norm {
            h = g.instance_norm(h, NORM_EPS);
        }
        let sum = g.add(x, h);
        g.relu(sum)
    }
}

impl Parameters for ResidualBlock {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Tensor)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
    }
}

// ---------------------------------------------------------------------------
// Normalization primitives

/// Per-channel `(x − μ) / sqrt(σ² + eps)` over frames.
pub fn instance_norm(features: &Tensor, eps: f64) -> Result<Tensor> {
    if features.cols() == 0 {
        return Err(SaicError::Shape("instance_norm needs at least one frame".into()));
    }
    Ok(instance_norm_forward(features, eps).0)
}

/// `scale ⊙ instance_norm(features) + shift`, per channel.
pub fn adain(features: &Tensor, scale: &[f64], shift: &[f64], eps: f64) -> Result<Tensor> {
    let ch = features.rows();
    if scale.len() != ch || shift.len() != ch {
        return Err(SaicError::Shape(format!(
            "adain: {ch} channels but {} scales / {} shifts",
            scale.len(),
            shift.len()
        )));
    }
    let mut out = instance_norm(features, eps)?;
    for r in 0..ch {
        let (a, b) = (scale[r], shift[r]);
        out.row_mut(r).iter_mut().for_each(|v| *v = a * *v + b);
    }
    Ok(out)
}

/// Graph version of [`adain`]; `scale` and `shift` are `channels × 1` nodes.
pub fn adain_node(g: &mut Graph<'_>, x: NodeId, scale: NodeId, shift: NodeId, eps: f64) -> NodeId {
    let n = g.instance_norm(x, eps);
    let s = g.mul_rows(n, scale);
    g.add_bias(s, shift)
}

fn check_crop(cfg: &ModelConfig, mel: &Tensor) -> Result<()> {
    if mel.shape() != (cfg.mel_bins, cfg.frames) {
        return Err(SaicError::Shape(format!(
            "expected a {}x{} crop, got {:?}",
            cfg.mel_bins,
            cfg.frames,
            mel.shape()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Content Encoder

/// Instance-normalizes the input spectrogram per mel bin, so static spectral
/// shape (where identity lives) never reaches the content code.
#[derive(Clone, Debug, PartialEq)]
pub struct ContentEncoder {
    pub cfg: ModelConfig,
    pub input: Conv1d,
    pub blocks: Vec<ResidualBlock>,
    pub output: Linear,
}

impl ContentEncoder {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            cfg: cfg.clone(),
            input: Conv1d::new(cfg.mel_bins, cfg.hidden, 1, rng),
            blocks: (0..RESIDUAL_BLOCKS)
                .map(|_| ResidualBlock::new(cfg.hidden, cfg.kernel, true, rng))
                .collect(),
            output: small_linear(cfg.hidden, cfg.content_dim, rng),
        }
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, mel: NodeId, trainable: bool) -> NodeId {
        self.forward_traced(g, mel, trainable).0
    }

    /// Embedding node plus the output node of the input stage and every block.
    pub fn forward_traced<'a>(&'a self, g: &mut Graph<'a>, mel: NodeId, trainable: bool) -> (NodeId, Vec<NodeId>) {
        let mut trace = Vec::new();
        let n = g.instance_norm(mel, NORM_EPS);
        let mut h = self.input.forward(g, n, trainable);
        trace.push(h);
        for b in &self.blocks {
            h = b.forward(g, h, trainable);
            trace.push(h);
        }
        let pooled = g.mean_cols(h);
        (self.output.forward(g, pooled, trainable), trace)
    }

    pub fn encode(&self, mel: &Tensor) -> Result<Tensor> {
        check_crop(&self.cfg, mel)?;
        let mut g = Graph::new();
        let x = g.constant(mel);
        let out = self.forward(&mut g, x, false);
        Ok(g.value(out).clone())
    }

    /// Intermediate activations: input stage then each residual block.
    pub fn activations(&self, mel: &Tensor) -> Result<Vec<Tensor>> {
        check_crop(&self.cfg, mel)?;
        let mut g = Graph::new();
        let x = g.constant(mel);
        let (_, trace) = self.forward_traced(&mut g, x, false);
        Ok(trace.into_iter().map(|id| g.value(id).clone()).collect())
    }
}

impl Parameters for ContentEncoder {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Tensor)) {
        self.input.visit(&join(prefix, "input"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
        self.output.visit(&join(prefix, "output"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.input.visit_mut(&join(prefix, "input"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

// ---------------------------------------------------------------------------
// Speaker Encoder

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEncoder {
    pub cfg: ModelConfig,
    pub input: Conv1d,
    pub blocks: Vec<ResidualBlock>,
    pub dense: Vec<Linear>,
}

impl SpeakerEncoder {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            cfg: cfg.clone(),
            input: Conv1d::new(cfg.mel_bins, cfg.hidden, 1, rng),
            blocks: (0..RESIDUAL_BLOCKS)
                .map(|_| ResidualBlock::new(cfg.hidden, cfg.kernel, true, rng))
                .collect(),
            dense: vec![
                Linear::new(cfg.hidden, cfg.hidden, rng),
                small_linear(cfg.hidden, cfg.speaker_dim, rng),
            ],
        }
    }

    /// Pooled post-block features before the dense layers.
    pub fn pooled_features<'a>(&'a self, g: &mut Graph<'a>, mel: NodeId, trainable: bool) -> NodeId {
        let mut h = self.input.forward(g, mel, trainable);
        for b in &self.blocks {
            h = b.forward(g, h, trainable);
        }
        g.mean_cols(h)
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, mel: NodeId, trainable: bool) -> NodeId {
        let pooled = self.pooled_features(g, mel, trainable);
        let h = self.dense[0].forward(g, pooled, trainable);
        let h = g.relu(h);
        self.dense[1].forward(g, h, trainable)
    }

    pub fn encode(&self, mel: &Tensor) -> Result<Tensor> {
        check_crop(&self.cfg, mel)?;
        let mut g = Graph::new();
        let x = g.constant(mel);
        let out = self.forward(&mut g, x, false);
        Ok(g.value(out).clone())
    }
}

impl Parameters for SpeakerEncoder {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Tensor)) {
        self.input.visit(&join(prefix, "input"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
        for (i, d) in self.dense.iter().enumerate() {
            d.visit(&join(prefix, &format!("dense{i}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.input.visit_mut(&join(prefix, "input"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
        for (i, d) in self.dense.iter_mut().enumerate() {
            d.visit_mut(&join(prefix, &format!("dense{i}")), f);
        }
    }
}

// ---------------------------------------------------------------------------
// Fusion Decoder

/// Content branch: the content vector is projected, broadcast over frames,
/// offset by a learned per-frame bias and rectified, then passed through
/// convolution + AdaIN layers. Style branch: two dense layers emit one
/// `(scale, shift)` pair per AdaIN site.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionDecoder {
    pub cfg: ModelConfig,
    pub content_in: Linear,
    pub positional: Tensor,
    pub layers: Vec<Conv1d>,
    pub style_hidden: Linear,
    pub style_out: Linear,
    pub output: Conv1d,
}

impl FusionDecoder {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let h = cfg.hidden;
        let layers: Vec<Conv1d> = (0..cfg.decoder_layers).map(|_| Conv1d::new(h, h, cfg.kernel, rng)).collect();
        let mut style_out = Linear::new(h, 2 * h * cfg.decoder_layers, rng);
        // start near the identity style: scale 1, shift 0
        style_out.weight.scale_assign(0.1);
        for l in 0..cfg.decoder_layers {
            for c in 0..h {
                style_out.bias.data_mut()[2 * h * l + c] = 1.0;
            }
        }
        let positional = Tensor::from_vec(h, cfg.frames, (0..h * cfg.frames).map(|_| rng.random_range(-1.0..1.0)).collect())
            .expect("shape");
        Self {
            cfg: cfg.clone(),
            content_in: Linear::new(cfg.content_dim, h, rng),
            positional,
            layers,
            style_hidden: Linear::new(cfg.speaker_dim, h, rng),
            style_out,
            output: Conv1d::new(h, cfg.mel_bins, 1, rng),
        }
    }

    /// Number of AdaIN sites in the content branch.
    pub fn adain_sites(&self) -> usize {
        self.layers.len()
    }

    /// Number of `(scale, shift)` pairs the style branch emits.
    pub fn style_pairs(&self) -> usize {
        self.style_out.weight.rows() / (2 * self.cfg.hidden)
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, speaker: NodeId, content: NodeId, trainable: bool) -> NodeId {
        let h = self.cfg.hidden;
        let s = self.style_hidden.forward(g, speaker, trainable);
        let s = g.relu(s);
        let style = self.style_out.forward(g, s, trainable);

        let c = self.content_in.forward(g, content, trainable);
        let c = g.broadcast_cols(c, self.cfg.frames);
        let pos = bind(g, &self.positional, trainable);
        let x = g.add(c, pos);
        let mut x = g.relu(x);
        for (l, conv) in self.layers.iter().enumerate() {
            let y = conv.forward(g, x, trainable);
            let scale = g.row_slice(style, 2 * h * l, h);
            let shift = g.row_slice(style, 2 * h * l + h, h);
            let y = adain_node(g, y, scale, shift, NORM_EPS);
            x = g.relu(y);
        }
        self.output.forward(g, x, trainable)
    }

    pub fn decode(&self, speaker: &Tensor, content: &Tensor) -> Result<Tensor> {
        if speaker.shape() != (self.cfg.speaker_dim, 1) || content.shape() != (self.cfg.content_dim, 1) {
            return Err(SaicError::Shape(format!(
                "decoder expects ({}x1, {}x1) embeddings, got ({:?}, {:?})",
                self.cfg.speaker_dim,
                self.cfg.content_dim,
                speaker.shape(),
                content.shape()
            )));
        }
        let mut g = Graph::new();
        let s = g.constant(speaker);
        let c = g.constant(content);
        let out = self.forward(&mut g, s, c, false);
        Ok(g.value(out).clone())
    }
}

impl Parameters for FusionDecoder {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Tensor)) {
        self.content_in.visit(&join(prefix, "content_in"), f);
        f(join(prefix, "positional"), &self.positional);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layer{i}")), f);
        }
        self.style_hidden.visit(&join(prefix, "style_hidden"), f);
        self.style_out.visit(&join(prefix, "style_out"), f);
        self.output.visit(&join(prefix, "output"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.content_in.visit_mut(&join(prefix, "content_in"), f);
        f(join(prefix, "positional"), &mut self.positional);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layer{i}")), f);
        }
        self.style_hidden.visit_mut(&join(prefix, "style_hidden"), f);
        self.style_out.visit_mut(&join(prefix, "style_out"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

/// Seeded construction of all three networks from independent streams.
pub fn init_networks(cfg: &ModelConfig, seed: u64) -> (ContentEncoder, SpeakerEncoder, FusionDecoder) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let ce = ContentEncoder::new(cfg, &mut rng);
    rng.set_stream(2);
    let se = SpeakerEncoder::new(cfg, &mut rng);
    rng.set_stream(3);
    let fd = FusionDecoder::new(cfg, &mut rng);
    (ce, se, fd)
}
