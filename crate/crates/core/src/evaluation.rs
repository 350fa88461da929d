//! Speaker-identification protocol for swapped utterances and embedding-space
//! disentanglement metrics.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Graph;
use crate::dataset::{batch_iter, Example, PreparedData};
use crate::error::{Result, SaicError};
use crate::features::hex_prefix;
use crate::inference::Anonymizer;
use crate::model::{Conv1d, Linear, Parameters};
use crate::losses::OptimizerKind;
use crate::tensor::Tensor;
use crate::training::{Checkpoint, OptimizerState};

// ---------------------------------------------------------------------------
// Verification oracle

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub hidden: usize,
    pub kernel: usize,
    pub embedding_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Minimum held-out top-1 accuracy before any evaluation may run.
    pub floor: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            kernel: 5,
            embedding_dim: 64,
            epochs: 30,
            batch_size: 16,
            lr: 0.01,
            momentum: 0.9,
            seed: 11,
            floor: 0.95,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.embedding_dim == 0 {
            return Err(SaicError::config("eval.oracle.hidden", "widths must be positive"));
        }
        if self.kernel % 2 == 0 {
            return Err(SaicError::config("eval.oracle.kernel", "must be odd"));
        }
        if self.batch_size == 0 {
            return Err(SaicError::config("eval.oracle.batch_size", "must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(SaicError::config("eval.oracle.lr", "must be finite and > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(SaicError::config("eval.oracle.momentum", "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.floor) {
            return Err(SaicError::config("eval.oracle.floor", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Three ReLU convolutions, mean pooling to the embedding, and a linear
/// softmax head used only during training.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleNet {
    pub convs: Vec<Conv1d>,
    pub head: Linear,
}

impl OracleNet {
    pub fn new(mel_bins: usize, speakers: usize, cfg: &OracleConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Self {
            convs: vec![
                Conv1d::new(mel_bins, cfg.hidden, cfg.kernel, &mut rng),
                Conv1d::new(cfg.hidden, cfg.hidden, cfg.kernel, &mut rng),
                Conv1d::new(cfg.hidden, cfg.embedding_dim, cfg.kernel, &mut rng),
            ],
            head: Linear::new(cfg.embedding_dim, speakers, &mut rng),
        }
    }

    fn embed_node<'a>(&'a self, g: &mut Graph<'a>, x: crate::autodiff::NodeId, trainable: bool) -> crate::autodiff::NodeId {
        let mut h = x;
        for c in &self.convs {
            let y = c.forward(g, h, trainable);
            h = g.relu(y);
        }
        g.mean_cols(h)
    }

    pub fn embed(&self, mel: &Tensor) -> Result<Tensor> {
        if mel.rows() != self.convs[0].in_channels() {
            return Err(SaicError::Shape(format!(
                "oracle expects {} mel bins, got {}",
                self.convs[0].in_channels(),
                mel.rows()
            )));
        }
        let mut g = Graph::new();
        let x = g.constant(mel);
        let e = self.embed_node(&mut g, x, false);
        Ok(g.value(e).clone())
    }
}

impl Parameters for OracleNet {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Tensor)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&format!("{prefix}conv{i}"), f);
        }
        self.head.visit(&format!("{prefix}head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&format!("{prefix}conv{i}"), f);
        }
        self.head.visit_mut(&format!("{prefix}head"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerificationOracle {
    pub cfg: OracleConfig,
    pub net: OracleNet,
    pub speakers: Vec<String>,
    /// Unit-norm centroid per speaker, one row each.
    pub centroids: Tensor,
    pub frames: usize,
    pub held_out_top1: f64,
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.iter().map(|x| x * x).sum::<f64>().sqrt(), b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Trains on the train split, builds centroids from it, and refuses to return
/// an oracle whose held-out top-1 falls below `cfg.floor`.
pub fn train_oracle(data: &PreparedData, cfg: &OracleConfig) -> Result<VerificationOracle> {
    cfg.validate()?;
    let n_spk = data.num_speakers();
    if n_spk < 2 {
        return Err(SaicError::Manifest(format!("need >= 2 speakers, found {n_spk}")));
    }
    let train = &data.train;
    let mut covered = vec![false; n_spk];
    train.iter().for_each(|e| covered[e.speaker] = true);
    if let Some(s) = covered.iter().position(|c| !c) {
        return Err(SaicError::Manifest(format!("speaker {} has no train utterances", data.manifest.speakers[s])));
    }
    let mut net = OracleNet::new(data.feature.mel_bins, n_spk, cfg);
    let mut opt = OptimizerState::new(OptimizerKind::Momentum, cfg.momentum);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for batch in batch_iter(train, cfg.batch_size, cfg.seed, epoch as u64)? {
            let (loss, grads) = {
                let mut g = Graph::new();
                let mut terms = Vec::new();
                for ex in &batch {
                    let x = g.constant(&ex.crop.values);
                    let e = net.embed_node(&mut g, x, true);
                    let logits = net.head.forward(&mut g, e, true);
                    let ce = g.softmax_cross_entropy(logits, ex.speaker);
                    terms.push(g.scale(ce, 1.0 / batch.len() as f64));
                }
                let mut sum = terms[0];
                for &t in &terms[1..] {
                    sum = g.add(sum, t);
                }
                let loss = g.value(sum).item();
                let grads = g.backward(sum);
                (loss, net.collect_grads(&g, &grads))
            };
            if !loss.is_finite() {
                return Err(SaicError::NonFiniteLoss {
                    context: format!("oracle epoch {}", epoch + 1),
                });
            }
            total += loss * batch.len() as f64;
            opt.step_params(&mut net, "", &grads, cfg.lr);
        }
        log::info!("oracle epoch {}/{}: loss {:.5}", epoch + 1, cfg.epochs, total / train.len() as f64);
    }

    let dim = cfg.embedding_dim;
    let mut centroids = Tensor::zeros(n_spk, dim);
    for ex in train {
        let e = unit(net.embed(&ex.crop.values)?.data());
        centroids.row_mut(ex.speaker).iter_mut().zip(&e).for_each(|(c, v)| *c += v);
    }
    for s in 0..n_spk {
        let u = unit(centroids.row(s));
        centroids.row_mut(s).copy_from_slice(&u);
    }
    let mut oracle = VerificationOracle {
        cfg: cfg.clone(),
        net,
        speakers: data.manifest.speakers.clone(),
        centroids,
        frames: data.feature.frames_per_crop,
        held_out_top1: 0.0,
    };
    let held_out: &[Example] = if data.test.is_empty() { train } else { &data.test };
    let mut correct = 0;
    for ex in held_out {
        if oracle.identify(&ex.crop.values)?.0 == ex.speaker {
            correct += 1;
        }
    }
    oracle.held_out_top1 = correct as f64 / held_out.len() as f64;
    log::info!("oracle held-out top-1 {:.4}", oracle.held_out_top1);
    if oracle.held_out_top1 < cfg.floor {
        return Err(SaicError::OracleBelowFloor {
            accuracy: oracle.held_out_top1,
            floor: cfg.floor,
        });
    }
    Ok(oracle)
}

/// Highest cosine score wins; exact ties go to the lower speaker index.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

impl VerificationOracle {
    pub fn scores(&self, embedding: &[f64]) -> Vec<f64> {
        (0..self.centroids.rows()).map(|s| cosine(embedding, self.centroids.row(s))).collect()
    }

    /// Speaker index and cosine scores for one normalized crop.
    pub fn identify(&self, crop: &Tensor) -> Result<(usize, Vec<f64>)> {
        if crop.cols() != self.frames {
            return Err(SaicError::Shape(format!("oracle expects {} frames, got {}", self.frames, crop.cols())));
        }
        let e = self.net.embed(crop)?;
        let scores = self.scores(e.data());
        Ok((argmax_first(&scores), scores))
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.net.digest().as_bytes());
        for v in self.centroids.data() {
            h.update(v.to_bits().to_le_bytes());
        }
        hex_prefix(&h.finalize(), 32)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = OracleFile {
            cfg: self.cfg.clone(),
            speakers: self.speakers.clone(),
            frames: self.frames,
            mel_bins: self.net.convs[0].in_channels(),
            held_out_top1: self.held_out_top1,
            params: self.net.flatten(),
            centroids: self.centroids.data().to_vec(),
        };
        let json = serde_json::to_vec(&file)?;
        fs::write(path, json).map_err(|e| SaicError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| SaicError::io(path, e))?;
        let f: OracleFile = serde_json::from_slice(&bytes)?;
        let mut net = OracleNet::new(f.mel_bins, f.speakers.len(), &f.cfg);
        if net.param_count() != f.params.len() {
            return Err(SaicError::Shape(format!("oracle file holds {} parameters, expected {}", f.params.len(), net.param_count())));
        }
        net.assign_flat(&f.params);
        let centroids = Tensor::from_vec(f.speakers.len(), f.cfg.embedding_dim, f.centroids)?;
        Ok(Self {
            cfg: f.cfg,
            net,
            speakers: f.speakers,
            centroids,
            frames: f.frames,
            held_out_top1: f.held_out_top1,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct OracleFile {
    cfg: OracleConfig,
    speakers: Vec<String>,
    frames: usize,
    mel_bins: usize,
    held_out_top1: f64,
    params: Vec<f64>,
    centroids: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Swap evaluation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair: usize,
    pub content_utterance: String,
    pub identity_utterance: String,
    /// Speaker i, whose content is kept.
    pub source_speaker: usize,
    /// Speaker j, whose identity is imposed.
    pub target_speaker: usize,
    pub predicted: usize,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisentanglementReport {
    pub k: usize,
    pub speaker_knn_acc_on_speaker_emb: f64,
    pub speaker_knn_acc_on_content_emb: f64,
    pub chance_level: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub pairs: usize,
    pub speakers: Vec<String>,
    pub chance_level: f64,
    pub oracle_top1: f64,
    pub target_hits: usize,
    pub source_hits: usize,
    pub target_top1: f64,
    pub source_top1: f64,
    pub records: Vec<PairRecord>,
    pub disentanglement: Option<DisentanglementReport>,
}

/// Runs explicit `(content example, identity example)` swaps over the test
/// split and scores them with the oracle.
pub fn eval_swaps(
    ckpt: &Checkpoint,
    oracle: &VerificationOracle,
    data: &PreparedData,
    swaps: &[(usize, usize)],
    seed: u64,
) -> Result<EvalReport> {
    if oracle.held_out_top1 < oracle.cfg.floor {
        return Err(SaicError::OracleBelowFloor {
            accuracy: oracle.held_out_top1,
            floor: oracle.cfg.floor,
        });
    }
    if oracle.speakers != data.manifest.speakers {
        return Err(SaicError::Manifest("oracle speaker list does not match the manifest".into()));
    }
    let a = Anonymizer::new(ckpt)?;
    let oracle_digest = oracle.digest();
    let test = &data.test;
    let mut records = Vec::with_capacity(swaps.len());
    for (pair, &(ci, ji)) in swaps.iter().enumerate() {
        let (c, j) = (&test[ci], &test[ji]);
        let synth = a.swap_crops(&c.crop.values, &j.crop.values)?;
        let (predicted, scores) = oracle.identify(&synth)?;
        records.push(PairRecord {
            pair,
            content_utterance: data.manifest.records[c.record].utterance_id.clone(),
            identity_utterance: data.manifest.records[j.record].utterance_id.clone(),
            source_speaker: c.speaker,
            target_speaker: j.speaker,
            predicted,
            scores,
        });
    }
    a.verify_frozen()?;
    if oracle.digest() != oracle_digest {
        return Err(SaicError::Checkpoint("oracle changed during evaluation".into()));
    }
    let target_hits = records.iter().filter(|r| r.predicted == r.target_speaker).count();
    let source_hits = records.iter().filter(|r| r.predicted == r.source_speaker).count();
    let n = records.len().max(1) as f64;
    Ok(EvalReport {
        seed,
        pairs: records.len(),
        speakers: data.manifest.speakers.clone(),
        chance_level: 1.0 / data.manifest.speakers.len() as f64,
        oracle_top1: oracle.held_out_top1,
        target_hits,
        source_hits,
        target_top1: target_hits as f64 / n,
        source_top1: source_hits as f64 / n,
        records,
        disentanglement: None,
    })
}

/// Seeded draws of a source speaker i, a different target speaker j, and one
/// test utterance of each, as positions in the test split.
pub fn draw_pairs(data: &PreparedData, pairs: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let n_spk = data.num_speakers();
    let mut by_speaker: Vec<Vec<usize>> = vec![Vec::new(); n_spk];
    for (pos, ex) in data.test.iter().enumerate() {
        by_speaker[ex.speaker].push(pos);
    }
    let present: Vec<usize> = (0..n_spk).filter(|&s| !by_speaker[s].is_empty()).collect();
    if present.len() < 2 {
        return Err(SaicError::Manifest(format!(
            "test split covers {} speaker(s), need >= 2",
            present.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..pairs)
        .map(|_| {
            let i = present[rng.random_range(0..present.len())];
            let mut j = present[rng.random_range(0..present.len() - 1)];
            if j >= i {
                j = present[present.iter().position(|&s| s == j).unwrap() + 1];
            }
            let ci = by_speaker[i][rng.random_range(0..by_speaker[i].len())];
            let ji = by_speaker[j][rng.random_range(0..by_speaker[j].len())];
            (ci, ji)
        })
        .collect())
}

pub fn eval_anonymization(
    ckpt: &Checkpoint,
    oracle: &VerificationOracle,
    data: &PreparedData,
    pairs: usize,
    seed: u64,
) -> Result<EvalReport> {
    let swaps = draw_pairs(data, pairs, seed)?;
    eval_swaps(ckpt, oracle, data, &swaps, seed)
}

/// Two-sided exact binomial acceptance band `[lo, hi]` (as fractions) for
/// `n` trials at success probability `p`, each tail holding at most
/// `(1 − level) / 2`.
pub fn binomial_band(n: usize, p: f64, level: f64) -> (f64, f64) {
    let tail = (1.0 - level) / 2.0;
    let mut pmf = vec![0.0; n + 1];
    // log-space to stay finite for large n
    let ln_fact: Vec<f64> = std::iter::once(0.0)
        .chain((1..=n).scan(0.0, |acc, k| {
            *acc += (k as f64).ln();
            Some(*acc)
        }))
        .collect();
    for (k, v) in pmf.iter_mut().enumerate() {
        let ln = ln_fact[n] - ln_fact[k] - ln_fact[n - k] + k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln();
        *v = ln.exp();
    }
    let mut lo = 0;
    let mut acc = 0.0;
    for (k, &v) in pmf.iter().enumerate() {
        if acc + v > tail {
            lo = k;
            break;
        }
        acc += v;
    }
    let mut hi = n;
    acc = 0.0;
    for k in (0..=n).rev() {
        if acc + pmf[k] > tail {
            hi = k;
            break;
        }
        acc += pmf[k];
    }
    (lo as f64 / n as f64, hi as f64 / n as f64)
}

// ---------------------------------------------------------------------------
// Disentanglement

/// Leave-one-out k-NN accuracy under cosine distance. Distance ties keep the
/// lower index; vote ties go to the lower label.
pub fn knn_accuracy(embeddings: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64> {
    if embeddings.len() != labels.len() || embeddings.is_empty() {
        return Err(SaicError::Shape("one label per embedding required".into()));
    }
    if k == 0 || k >= embeddings.len() {
        return Err(SaicError::config("eval.k", format!("must lie in [1, {})", embeddings.len())));
    }
    let n_labels = labels.iter().max().map_or(0, |m| m + 1);
    let mut correct = 0;
    for (i, e) in embeddings.iter().enumerate() {
        let mut d: Vec<(f64, usize)> = embeddings
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(j, o)| (1.0 - cosine(e, o), j))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![0usize; n_labels];
        for &(_, j) in &d[..k] {
            votes[labels[j]] += 1;
        }
        let best = votes.iter().enumerate().fold(0, |b, (l, &v)| if v > votes[b] { l } else { b });
        if best == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / embeddings.len() as f64)
}

/// Speaker and content embeddings of every test crop.
pub fn test_embeddings(ckpt: &Checkpoint, data: &PreparedData) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<usize>)> {
    let (ce, se) = ckpt.encoders()?;
    let mut s = Vec::new();
    let mut c = Vec::new();
    let mut labels = Vec::new();
    for ex in &data.test {
        s.push(se.encode(&ex.crop.values)?.data().to_vec());
        c.push(ce.encode(&ex.crop.values)?.data().to_vec());
        labels.push(ex.speaker);
    }
    Ok((s, c, labels))
}

pub fn disentanglement_report(ckpt: &Checkpoint, data: &PreparedData, k: usize) -> Result<DisentanglementReport> {
    let mut per_speaker = vec![0usize; data.num_speakers()];
    data.test.iter().for_each(|e| per_speaker[e.speaker] += 1);
    let min = per_speaker.iter().copied().filter(|&n| n > 0).min().unwrap_or(0);
    if k == 0 || k >= min {
        return Err(SaicError::config(
            "eval.k",
            format!("must lie in [1, {min}) for a test split with {min} utterance(s) per speaker"),
        ));
    }
    let (s, c, labels) = test_embeddings(ckpt, data)?;
    Ok(DisentanglementReport {
        k,
        speaker_knn_acc_on_speaker_emb: knn_accuracy(&s, &labels, k)?,
        speaker_knn_acc_on_content_emb: knn_accuracy(&c, &labels, k)?,
        chance_level: 1.0 / data.num_speakers() as f64,
    })
}

// ---------------------------------------------------------------------------
// Export

/// Writes `<out>.speaker.csv` and `<out>.content.csv` covering every
/// utterance of both splits, ordered by utterance id.
pub fn export_embeddings(ckpt: &Checkpoint, data: &PreparedData, out: &Path) -> Result<(PathBuf, PathBuf)> {
    let (ce, se) = ckpt.encoders()?;
    let mut rows: Vec<(&str, &str, Tensor, Tensor)> = Vec::new();
    for ex in data.train.iter().chain(&data.test) {
        let r = &data.manifest.records[ex.record];
        rows.push((&r.utterance_id, &r.speaker_id, se.encode(&ex.crop.values)?, ce.encode(&ex.crop.values)?));
    }
    rows.sort_by(|a, b| a.0.cmp(b.0));
    let base = out.to_string_lossy().into_owned();
    let paths = (PathBuf::from(format!("{base}.speaker.csv")), PathBuf::from(format!("{base}.content.csv")));
    for (path, kind, dim) in [
        (&paths.0, "speaker", ckpt.model.speaker_dim),
        (&paths.1, "content", ckpt.model.content_dim),
    ] {
        let mut text = String::from("utterance_id,speaker_id,embedding_kind");
        for d in 0..dim {
            text.push_str(&format!(",d{d}"));
        }
        text.push('\n');
        for (utt, spk, s, c) in &rows {
            let v = if kind == "speaker" { s } else { c };
            text.push_str(&format!("{utt},{spk},{kind}"));
            for x in v.data() {
                text.push_str(&format!(",{x}"));
            }
            text.push('\n');
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| SaicError::io(dir, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| SaicError::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| SaicError::io(path, e))?;
    }
    Ok(paths)
}
