//! End-to-end orchestration over a working directory: corpus synthesis, crop
//! preparation, both training stages, evaluation with threshold checks.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{
    generate_synthetic_corpus, load_crops, make_splits, prepare, scan_corpus, Manifest, PreparedData, SynthCorpusConfig,
};
use crate::error::{Result, SaicError};
use crate::evaluation::{
    binomial_band, disentanglement_report, eval_anonymization, export_embeddings, train_oracle, EvalReport, OracleConfig,
    VerificationOracle,
};
use crate::features::FeatureConfig;
use crate::losses::{OptimizerKind, PerceptualConfig, Stage1Config, Stage2Config};
use crate::model::ModelConfig;
use crate::training::{load_checkpoint, save_checkpoint, train_stage1, train_stage2, Checkpoint, Stage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Existing `root/<speaker>/*.wav` corpus. When absent a synthetic corpus
    /// is generated under the working directory.
    pub corpus_root: Option<PathBuf>,
    pub synth: SynthCorpusConfig,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus_root: None,
            synth: SynthCorpusConfig::default(),
            test_fraction: 0.2,
            seed: 5,
        }
    }
}

/// Network sizes. Input bins and crop length come from the feature config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub content_dim: usize,
    pub speaker_dim: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub decoder_layers: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            content_dim: 16,
            speaker_dim: 64,
            hidden: 48,
            kernel: 5,
            decoder_layers: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    pub target_top1_min: f64,
    pub source_top1_max: f64,
    /// Confidence level of the binomial band for the untrained control.
    pub control_level: f64,
    pub speaker_knn_min: f64,
    /// Allowed excess of content-embedding k-NN accuracy over chance.
    pub content_knn_margin: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            target_top1_min: 0.80,
            source_top1_max: 0.10,
            control_level: 0.99,
            speaker_knn_min: 0.90,
            content_knn_margin: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub pairs: usize,
    pub control_pairs: usize,
    pub k: usize,
    pub seed: u64,
    pub oracle: OracleConfig,
    pub thresholds: Thresholds,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pairs: 100,
            control_pairs: 200,
            k: 3,
            seed: 3,
            oracle: OracleConfig::default(),
            thresholds: Thresholds::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub workdir: PathBuf,
    /// Defaults to `<workdir>/checkpoints`.
    pub checkpoints: Option<PathBuf>,
    /// Defaults to `<workdir>/reports`.
    pub reports: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            workdir: PathBuf::from("saic-work"),
            checkpoints: None,
            reports: None,
        }
    }
}

/// Everything a run needs. The defaults are the desk-scale reference run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub feature: FeatureConfig,
    pub data: DataConfig,
    pub model: ModelSection,
    pub perceptual: PerceptualConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            feature: FeatureConfig::default(),
            data: DataConfig::default(),
            model: ModelSection::default(),
            perceptual: PerceptualConfig::default(),
            stage1: Stage1Config {
                optimizer: OptimizerKind::Adam,
                sigma: 0.0375,
                center_content_by_speaker: true,
                lr_latent: 0.01,
                lr_network: 0.001,
                ..Stage1Config::default()
            },
            stage2: Stage2Config {
                optimizer: OptimizerKind::Adam,
                lr: 0.001,
                ..Stage2Config::default()
            },
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            mel_bins: self.feature.mel_bins,
            frames: self.feature.frames_per_crop,
            hidden: self.model.hidden,
            kernel: self.model.kernel,
            content_dim: self.model.content_dim,
            speaker_dim: self.model.speaker_dim,
            decoder_layers: self.model.decoder_layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.feature.validate()?;
        if self.data.corpus_root.is_none() {
            self.data.synth.validate()?;
            if self.data.synth.sample_rate_hz != self.feature.sample_rate_hz {
                return Err(SaicError::config(
                    "data.synth.sample_rate_hz",
                    "must equal feature.sample_rate_hz",
                ));
            }
        }
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return Err(SaicError::config("data.test_fraction", "must lie in (0, 1)"));
        }
        self.model_config().validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.eval.oracle.validate()?;
        if self.eval.pairs == 0 {
            return Err(SaicError::config("eval.pairs", "must be >= 1"));
        }
        if self.eval.k == 0 {
            return Err(SaicError::config("eval.k", "must be >= 1"));
        }
        if !(self.eval.thresholds.control_level > 0.0 && self.eval.thresholds.control_level < 1.0) {
            return Err(SaicError::config("eval.thresholds.control_level", "must lie in (0, 1)"));
        }
        if self.paths.workdir.as_os_str().is_empty() {
            return Err(SaicError::config("paths.workdir", "must not be empty"));
        }
        Ok(())
    }

    /// Derives every seed from one value, keeping the components distinct.
    pub fn reseed(&mut self, seed: u64) {
        self.data.synth.seed = seed;
        self.data.seed = seed.wrapping_add(1);
        self.stage1.seed = seed.wrapping_add(2);
        self.stage2.seed = seed.wrapping_add(3);
        self.eval.seed = seed.wrapping_add(4);
        self.eval.oracle.seed = seed.wrapping_add(5);
        self.perceptual.seed = seed.wrapping_add(6);
    }

    pub fn workspace(&self) -> Workspace {
        let root = self.paths.workdir.clone();
        Workspace {
            checkpoints: self.paths.checkpoints.clone().unwrap_or_else(|| root.join("checkpoints")),
            reports: self.paths.reports.clone().unwrap_or_else(|| root.join("reports")),
            root,
        }
    }
}

/// File layout under the working directory.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub root: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Workspace {
    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    fn corpus_stamp(&self) -> PathBuf {
        self.corpus_dir().join("synth-config.json")
    }

    /// Split manifest used by every later step.
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn crop_cache(&self) -> PathBuf {
        self.root.join("crops")
    }

    pub fn checkpoint(&self, stage: Stage) -> PathBuf {
        self.checkpoints.join(format!("{}.ckpt", stage.name()))
    }

    pub fn oracle(&self) -> PathBuf {
        self.reports.join("oracle.json")
    }

    pub fn report(&self) -> PathBuf {
        self.reports.join("eval_report.json")
    }

    pub fn embeddings(&self) -> PathBuf {
        self.reports.join("embeddings")
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| SaicError::io(p, e))
}

fn require(what: &str, path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(SaicError::MissingPrerequisite {
            what: what.to_string(),
            path: path.to_path_buf(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Freshness {
    Created,
    UpToDate,
}

/// Generates the synthetic corpus unless one built from the same settings
/// already exists.
pub fn synth_data(cfg: &RunConfig) -> Result<(Manifest, Freshness)> {
    cfg.data.synth.validate()?;
    let ws = cfg.workspace();
    let dir = ws.corpus_dir();
    let stamp = serde_json::to_string_pretty(&cfg.data.synth)?;
    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() && fs::read_to_string(ws.corpus_stamp()).ok().as_deref() == Some(stamp.as_str()) {
        return Ok((Manifest::load(&manifest_path)?, Freshness::UpToDate));
    }
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| SaicError::io(&dir, e))?;
    }
    create_dir(&dir)?;
    let m = generate_synthetic_corpus(&cfg.data.synth, &dir, &cfg.feature.fingerprint())?;
    fs::write(ws.corpus_stamp(), stamp).map_err(|e| SaicError::io(ws.corpus_stamp(), e))?;
    Ok((m, Freshness::Created))
}

#[derive(Clone, Debug)]
pub struct PrepareSummary {
    pub manifest: Manifest,
    pub crops_written: usize,
    pub freshness: Freshness,
}

/// Builds the split manifest and the crop cache. Rerunning with unchanged
/// settings writes nothing; a changed feature config rebuilds the cache.
pub fn prepare_data(cfg: &RunConfig) -> Result<PrepareSummary> {
    cfg.validate()?;
    let ws = cfg.workspace();
    create_dir(&ws.root)?;
    let fp = cfg.feature.fingerprint();
    let (base, synth_fresh) = match &cfg.data.corpus_root {
        Some(root) => (scan_corpus(root, &fp)?, Freshness::UpToDate),
        None => synth_data(cfg)?,
    };
    let base = Manifest::new(base.records, fp.clone())?;
    base.validate()?;
    let manifest = make_splits(&base, cfg.data.test_fraction, cfg.data.seed)?;
    let path = ws.manifest();
    let unchanged = path.exists() && Manifest::load(&path).ok().as_ref() == Some(&manifest);
    if !unchanged {
        manifest.save(&path)?;
    }
    let cache = ws.crop_cache();
    if cache.exists() {
        for entry in fs::read_dir(&cache).map_err(|e| SaicError::io(&cache, e))? {
            let entry = entry.map_err(|e| SaicError::io(&cache, e))?;
            if entry.file_name().to_string_lossy() != fp {
                let p = entry.path();
                fs::remove_dir_all(&p).map_err(|e| SaicError::io(&p, e))?;
            }
        }
    }
    let (_, written) = load_crops(&manifest, &cfg.feature, Some(&cache))?;
    let freshness = if unchanged && written == 0 && synth_fresh == Freshness::UpToDate {
        Freshness::UpToDate
    } else {
        Freshness::Created
    };
    Ok(PrepareSummary {
        manifest,
        crops_written: written,
        freshness,
    })
}

/// Normalized examples from the prepared manifest and crop cache.
pub fn load_data(cfg: &RunConfig) -> Result<PreparedData> {
    let ws = cfg.workspace();
    require("prepared manifest (run `prepare` first)", &ws.manifest())?;
    let manifest = Manifest::load(&ws.manifest())?;
    let fp = cfg.feature.fingerprint();
    if manifest.feature_config_fingerprint != fp {
        return Err(SaicError::FingerprintMismatch {
            expected: fp,
            found: manifest.feature_config_fingerprint,
        });
    }
    let (crops, _) = load_crops(&manifest, &cfg.feature, Some(&ws.crop_cache()))?;
    prepare(&manifest, &cfg.feature, &crops)
}

pub fn run_stage1(cfg: &RunConfig, data: &PreparedData) -> Result<Checkpoint> {
    let ckpt = train_stage1(data, &cfg.model_config(), &cfg.perceptual, &cfg.stage1)?;
    let ws = cfg.workspace();
    create_dir(&ws.checkpoints)?;
    save_checkpoint(&ckpt, &ws.checkpoint(Stage::Stage1))?;
    Ok(ckpt)
}

pub fn run_stage2(cfg: &RunConfig, data: &PreparedData) -> Result<Checkpoint> {
    let ws = cfg.workspace();
    let path = ws.checkpoint(Stage::Stage1);
    require("stage-1 checkpoint", &path)?;
    let stage1 = load_checkpoint(&path)?;
    let ckpt = train_stage2(data, &stage1, &cfg.stage2)?;
    save_checkpoint(&ckpt, &ws.checkpoint(Stage::Stage2))?;
    Ok(ckpt)
}

pub fn load_stage2(cfg: &RunConfig) -> Result<Checkpoint> {
    let path = cfg.workspace().checkpoint(Stage::Stage2);
    require("stage-2 checkpoint", &path)?;
    let ckpt = load_checkpoint(&path)?;
    ckpt.require_stage(Stage::Stage2)?;
    Ok(ckpt)
}

/// Stage-2 checkpoint with every network at its seeded initialization.
pub fn untrained_checkpoint(cfg: &RunConfig, data: &PreparedData) -> Result<Checkpoint> {
    let s1 = Stage1Config {
        epochs: 0,
        ..cfg.stage1.clone()
    };
    let s2 = Stage2Config {
        epochs: 0,
        ..cfg.stage2.clone()
    };
    let stage1 = train_stage1(data, &cfg.model_config(), &cfg.perceptual, &s1)?;
    train_stage2(data, &stage1, &s2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    AtLeast,
    AtMost,
    Within,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCheck {
    pub metric: String,
    pub value: f64,
    pub comparison: Comparison,
    /// One bound for `at_least`/`at_most`, two for `within`.
    pub bounds: Vec<f64>,
    pub passed: bool,
}

impl ThresholdCheck {
    fn at_least(metric: &str, value: f64, bound: f64) -> Self {
        Self {
            metric: metric.into(),
            value,
            comparison: Comparison::AtLeast,
            bounds: vec![bound],
            passed: value >= bound,
        }
    }

    fn at_most(metric: &str, value: f64, bound: f64) -> Self {
        Self {
            metric: metric.into(),
            value,
            comparison: Comparison::AtMost,
            bounds: vec![bound],
            passed: value <= bound,
        }
    }

    fn within(metric: &str, value: f64, lo: f64, hi: f64) -> Self {
        Self {
            metric: metric.into(),
            value,
            comparison: Comparison::Within,
            bounds: vec![lo, hi],
            passed: (lo..=hi).contains(&value),
        }
    }

    pub fn threshold_text(&self) -> String {
        match self.comparison {
            Comparison::AtLeast => format!(">= {:.4}", self.bounds[0]),
            Comparison::AtMost => format!("<= {:.4}", self.bounds[0]),
            Comparison::Within => format!("in [{:.4}, {:.4}]", self.bounds[0], self.bounds[1]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: EvalReport,
    /// Same protocol on an untrained checkpoint.
    pub control: EvalReport,
    pub checks: Vec<ThresholdCheck>,
}

impl Evaluation {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Swap evaluation, untrained control and disentanglement for one checkpoint.
pub fn evaluate_checkpoint(
    cfg: &RunConfig,
    data: &PreparedData,
    ckpt: &Checkpoint,
    oracle: &VerificationOracle,
) -> Result<Evaluation> {
    let ev = &cfg.eval;
    let th = &ev.thresholds;
    let mut report = eval_anonymization(ckpt, oracle, data, ev.pairs, ev.seed)?;
    let dis = disentanglement_report(ckpt, data, ev.k)?;
    let untrained = untrained_checkpoint(cfg, data)?;
    let control = eval_anonymization(&untrained, oracle, data, ev.control_pairs, ev.seed.wrapping_add(1))?;
    let (lo, hi) = binomial_band(ev.control_pairs, control.chance_level, th.control_level);
    let checks = vec![
        ThresholdCheck::at_least("oracle_top1", oracle.held_out_top1, oracle.cfg.floor),
        ThresholdCheck::at_least("target_top1", report.target_top1, th.target_top1_min),
        ThresholdCheck::at_most("source_top1", report.source_top1, th.source_top1_max),
        ThresholdCheck::within("control_target_top1", control.target_top1, lo, hi),
        ThresholdCheck::at_least("speaker_knn_on_speaker_emb", dis.speaker_knn_acc_on_speaker_emb, th.speaker_knn_min),
        ThresholdCheck::at_most(
            "speaker_knn_on_content_emb",
            dis.speaker_knn_acc_on_content_emb,
            dis.chance_level + th.content_knn_margin,
        ),
    ];
    report.disentanglement = Some(dis);
    Ok(Evaluation {
        report,
        control,
        checks,
    })
}

/// Trains the oracle, evaluates the stage-2 checkpoint and writes the oracle
/// and the report under the reports directory.
pub fn evaluate(cfg: &RunConfig) -> Result<Evaluation> {
    let ckpt = load_stage2(cfg)?;
    let data = load_data(cfg)?;
    let oracle = train_oracle(&data, &cfg.eval.oracle)?;
    let ws = cfg.workspace();
    create_dir(&ws.reports)?;
    oracle.save(&ws.oracle())?;
    let out = evaluate_checkpoint(cfg, &data, &ckpt, &oracle)?;
    let json = serde_json::to_string_pretty(&out)?;
    fs::write(ws.report(), json).map_err(|e| SaicError::io(ws.report(), e))?;
    Ok(out)
}

pub fn export(cfg: &RunConfig) -> Result<(PathBuf, PathBuf)> {
    let ckpt = load_stage2(cfg)?;
    let data = load_data(cfg)?;
    let ws = cfg.workspace();
    create_dir(&ws.reports)?;
    export_embeddings(&ckpt, &data, &ws.embeddings())
}
