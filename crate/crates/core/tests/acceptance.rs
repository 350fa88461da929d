//! Acceptance suite. Each criterion runs in isolation and prints one
//! PASS/FAIL line; the process exits non-zero if any criterion fails.
//!
//! The reference run trains both stages on the default synthetic corpus, so
//! a full pass takes several minutes on one core.

mod common;

use std::error::Error;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saic_core::dataset::{read_metadata, Example, PreparedData};
use saic_core::evaluation::{draw_pairs, train_oracle, VerificationOracle};
use saic_core::features::estimate_f0;
use saic_core::inference::{anonymize, reconstruct, AnonymizationRequest, Anonymizer};
use saic_core::losses::{
    grad_check, perceptual_loss, stage1_loss, stage2_loss, PerceptualConfig, PerceptualNet, Stage1Config, Stage2Config,
};
use saic_core::model::{adain, init_networks, instance_norm, NORM_EPS};
use saic_core::pipeline::{self, Evaluation, RunConfig};
use saic_core::training::{
    decode_checkpoint, encode_checkpoint, init_latent_tables, train_stage1, train_stage2, Checkpoint, Stage,
};
use saic_core::{ModelConfig, SaicError, Tensor};

use common::{flat_params, random_examples, random_tensor, single_utterance, stage2_at, tiny_model};

type Outcome = Result<(bool, String), Box<dyn Error>>;

/// Mean-L1 reconstruction error of the trained reference checkpoint on train
/// utterances, frozen from the reference run with headroom.
const RECONSTRUCTION_MAE_BOUND: f64 = 0.70;
const MEMORIZATION_LR_NETWORK: f64 = 0.003;
const F0_SWAP_MIN: f64 = 0.80;
const EMBEDDING_ONLY_RATIO: f64 = 0.20;
const TRAINING_BUDGET_S: f64 = 900.0;

struct Suite {
    total: usize,
    failed: Vec<String>,
}

impl Suite {
    fn run(&mut self, name: &str, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f));
        let secs = start.elapsed().as_secs_f64();
        let (passed, detail) = match result {
            Ok(Ok(v)) => v,
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(p) => (false, format!("panic: {}", panic_text(&p))),
        };
        self.total += 1;
        if !passed {
            self.failed.push(name.to_string());
        }
        println!("[{}] {name}: {detail} ({secs:.1} s)", if passed { "PASS" } else { "FAIL" });
    }
}

fn panic_text(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown panic".into())
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Numerical criteria

fn gradient_correctness() -> Outcome {
    let cfg = tiny_model();
    let nets = init_networks(&cfg, 11);
    let examples = random_examples(&cfg, 2, 2, 12);
    let batch: Vec<&Example> = examples.iter().collect();
    let latents = init_latent_tables(4, 2, cfg.content_dim, cfg.speaker_dim, 13, "t".into());
    let net = PerceptualNet::new(cfg.mel_bins, &PerceptualConfig::default())?;
    let s2 = Stage2Config::default();
    let x0 = flat_params(&nets);
    let err = grad_check(|x| stage2_at(&net, &nets, &latents, &batch, &s2, x), &x0, 1e-6, 64, 14)?;
    Ok((err < 1e-3, format!("max relative error {err:.2e} < 1e-3 over 64 of {} parameters", x0.len())))
}

fn normalization_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (mut worst_mean, mut mismatches) = (0.0f64, 0usize);
    for _ in 0..1000 {
        let channels = rng.random_range(1..=16);
        let frames = rng.random_range(2..=64);
        let gain = 10f64.powf(rng.random_range(-2.0..2.0));
        let offset = rng.random_range(-100.0..100.0);
        let x = random_tensor(channels, frames, &mut rng).map(|v| gain * v + offset);
        let n = instance_norm(&x, NORM_EPS)?;
        for r in 0..channels {
            let m = n.row(r).iter().sum::<f64>() / frames as f64;
            worst_mean = worst_mean.max(m.abs());
        }
        let a = adain(&x, &vec![1.0; channels], &vec![0.0; channels], NORM_EPS)?;
        if a.data() != n.data() {
            mismatches += 1;
        }
    }
    Ok((
        worst_mean < 1e-5 && mismatches == 0,
        format!("max |channel mean| {worst_mean:.1e} < 1e-5, adain(x,1,0) != instance_norm(x) in {mismatches}/1000"),
    ))
}

fn loss_identities() -> Outcome {
    let cfg = tiny_model();
    let net = PerceptualNet::new(cfg.mel_bins, &PerceptualConfig::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut self_distance = 0.0f64;
    for _ in 0..20 {
        let a = random_tensor(cfg.mel_bins, cfg.frames, &mut rng);
        self_distance = self_distance.max(perceptual_loss(&net, &a, &a)?.abs());
    }

    let nets = init_networks(&cfg, 32);
    let examples = random_examples(&cfg, 2, 2, 33);
    let batch: Vec<&Example> = examples.iter().collect();
    let latents = init_latent_tables(4, 2, cfg.content_dim, cfg.speaker_dim, 34, "t".into());
    let x0 = flat_params(&nets);
    let grads = |l: [f64; 3]| -> saic_core::Result<Vec<f64>> {
        let c = Stage2Config {
            lambda_1: l[0],
            lambda_2: l[1],
            lambda_3: l[2],
            ..Default::default()
        };
        Ok(stage2_at(&net, &nets, &latents, &batch, &c, &x0)?.1)
    };
    let full = grads([1.0, 1.0, 1.0])?;
    let scale = full.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut linearity = 0.0f64;
    let mut dead_component = false;
    for k in 0..3 {
        let mut only = [0.0; 3];
        only[k] = 1.0;
        let mut without = [1.0; 3];
        without[k] = 0.0;
        let g_only = grads(only)?;
        let g_without = grads(without)?;
        dead_component |= g_only.iter().all(|&v| v == 0.0);
        let sum: Vec<f64> = g_only.iter().zip(&g_without).map(|(a, b)| a + b).collect();
        linearity = linearity.max(max_abs_diff(&sum, &full) / scale);
    }

    // Stage-1 latents set to the encoder outputs, with no noise and no
    // penalty, must give the stage-2 reconstruction term.
    let (ce, se, fd) = &nets;
    let mut coincidence = 0.0f64;
    for ex in &examples {
        let mut lat = init_latent_tables(1, 1, cfg.content_dim, cfg.speaker_dim, 0, "t".into());
        lat.content.row_mut(0).copy_from_slice(ce.encode(&ex.crop.values)?.data());
        lat.speaker.row_mut(0).copy_from_slice(se.encode(&ex.crop.values)?.data());
        let single = Example {
            utterance: 0,
            speaker: 0,
            ..ex.clone()
        };
        let s1 = Stage1Config {
            sigma: 0.0,
            lambda_noise: 0.0,
            ..Default::default()
        };
        let noise = vec![Tensor::zeros(cfg.content_dim, 1)];
        let r1 = stage1_loss(&net, fd, &lat, &[&single], &s1, &noise)?.reconstruction;
        let s2 = Stage2Config {
            lambda_1: 0.0,
            lambda_2: 0.0,
            ..Default::default()
        };
        let r2 = stage2_loss(&net, ce, se, fd, &latents, &[ex], &s2)?.components.2;
        coincidence = coincidence.max((r1 - r2).abs());
    }
    Ok((
        self_distance == 0.0 && linearity < 1e-10 && !dead_component && coincidence < 1e-12,
        format!(
            "P(a,a) max {self_distance:.1e}; lambda linearity residual {linearity:.1e} < 1e-10; \
             stage-1/stage-2 reconstruction gap {coincidence:.1e} < 1e-12"
        ),
    ))
}

/// Full-width default model; the reference stage-1 settings except for a
/// larger decoder step, since one utterance gives one step per epoch.
fn memorization(data: &PreparedData, cfg: &RunConfig) -> Outcome {
    let one = single_utterance(data, 0);
    let s1 = Stage1Config {
        epochs: 200,
        batch_size: 1,
        lr_network: MEMORIZATION_LR_NETWORK,
        ..cfg.stage1.clone()
    };
    let ckpt = train_stage1(&one, &ModelConfig::default(), &cfg.perceptual, &s1)?;
    let first = ckpt.log[0].components[0];
    let last = ckpt.log.last().unwrap().components[0];
    let ratio = last / first;
    Ok((ratio < 0.10, format!("reconstruction {first:.4} -> {last:.4} after 200 epochs, ratio {ratio:.3} < 0.10")))
}

// ---------------------------------------------------------------------------
// Reference run

struct Reference {
    cfg: RunConfig,
    data: PreparedData,
    stage1: Checkpoint,
    stage2: Checkpoint,
    oracle: VerificationOracle,
    eval: Evaluation,
    train_secs: f64,
}

fn prepared(root: &Path) -> Result<(RunConfig, PreparedData), Box<dyn Error>> {
    let mut cfg = RunConfig::default();
    cfg.paths.workdir = root.to_path_buf();
    pipeline::prepare_data(&cfg)?;
    let data = pipeline::load_data(&cfg)?;
    Ok((cfg, data))
}

fn reference_run(root: &Path) -> Result<Reference, Box<dyn Error>> {
    let (cfg, data) = prepared(root)?;
    let start = Instant::now();
    let stage1 = pipeline::run_stage1(&cfg, &data)?;
    let stage2 = pipeline::run_stage2(&cfg, &data)?;
    let train_secs = start.elapsed().as_secs_f64();
    let oracle = train_oracle(&data, &cfg.eval.oracle)?;
    let eval = pipeline::evaluate_checkpoint(&cfg, &data, &stage2, &oracle)?;
    Ok(Reference {
        cfg,
        data,
        stage1,
        stage2,
        oracle,
        eval,
        train_secs,
    })
}

fn trained<'r>(r: &'r Result<Reference, String>) -> Result<&'r Reference, Box<dyn Error>> {
    r.as_ref().map_err(|e| format!("reference run failed: {e}").into())
}

fn end_to_end(r: &Reference) -> Outcome {
    let get = |m: &str| r.eval.checks.iter().find(|c| c.metric == m).expect("check present");
    let parts = ["oracle_top1", "target_top1", "source_top1", "control_target_top1"].map(get);
    let within_budget = r.train_secs < TRAINING_BUDGET_S;
    let mut detail: Vec<String> = parts
        .iter()
        .map(|c| format!("{} {:.3} {}", c.metric, c.value, c.threshold_text()))
        .collect();
    detail.push(format!("training {:.0} s < {TRAINING_BUDGET_S:.0} s", r.train_secs));
    Ok((parts.iter().all(|c| c.passed) && within_budget, detail.join("; ")))
}

fn disentanglement(r: &Reference) -> Outcome {
    let checks: Vec<_> = r.eval.checks.iter().filter(|c| c.metric.starts_with("speaker_knn")).collect();
    let k = r.eval.report.disentanglement.as_ref().map_or(0, |d| d.k);
    let detail: Vec<String> = checks
        .iter()
        .map(|c| format!("{} {:.3} {}", c.metric, c.value, c.threshold_text()))
        .collect();
    Ok((checks.len() == 2 && checks.iter().all(|c| c.passed), format!("k={k}; {}", detail.join("; "))))
}

fn determinism(r: &Reference) -> Outcome {
    let bytes = |dir: &Path| -> Result<(Vec<u8>, Vec<u8>), Box<dyn Error>> {
        let mut cfg = RunConfig::default();
        cfg.paths.workdir = dir.to_path_buf();
        cfg.stage1.epochs = 3;
        cfg.stage2.epochs = 3;
        pipeline::synth_data(&cfg)?;
        pipeline::prepare_data(&cfg)?;
        let data = pipeline::load_data(&cfg)?;
        pipeline::run_stage1(&cfg, &data)?;
        pipeline::run_stage2(&cfg, &data)?;
        let ws = cfg.workspace();
        Ok((fs::read(ws.checkpoint(Stage::Stage1))?, fs::read(ws.checkpoint(Stage::Stage2))?))
    };
    let (a, b) = (tempfile::tempdir()?, tempfile::tempdir()?);
    let first = bytes(a.path())?;
    let second = bytes(b.path())?;
    let identical = first == second;

    let encoded = encode_checkpoint(&r.stage2)?;
    let decoded = decode_checkpoint(&encoded)?;
    let lossless = decoded == r.stage2 && encode_checkpoint(&decoded)? == encoded;

    let truncated = decode_checkpoint(&encoded[..encoded.len() - 7]);
    let rejected = matches!(truncated, Err(SaicError::Checksum));
    Ok((
        identical && lossless && rejected,
        format!(
            "repeated 3-epoch pipeline bit-identical: {identical}; round trip lossless: {lossless}; \
             truncated file rejected by checksum: {rejected}"
        ),
    ))
}

fn audio_path<'d>(data: &'d PreparedData, ex: &Example) -> &'d Path {
    &data.manifest.records[ex.record].audio_path
}

fn degenerate_swap(r: &Reference) -> Outcome {
    let dir = tempfile::tempdir()?;
    let mut compared = 0;
    for ex in r.data.test.iter().step_by(4) {
        let path = audio_path(&r.data, ex);
        let req = AnonymizationRequest {
            content_audio: path.to_path_buf(),
            identity_audio: path.to_path_buf(),
            out_wav: Some(dir.path().join("out.wav")),
            out_mel: None,
            out_heatmap: None,
        };
        let (swapped, _) = anonymize(&r.stage2, &req)?;
        let recon = reconstruct(&r.stage2, path)?;
        if swapped.values != recon.values {
            return Ok((false, format!("{} differs from its reconstruction", path.display())));
        }
        compared += 1;
    }
    Ok((compared > 0, format!("anonymize(x, x) == reconstruct(x) bit-for-bit on {compared} test utterances")))
}

// ---------------------------------------------------------------------------
// Further checks on the trained reference checkpoint

fn f0_follows_identity(r: &Reference) -> Outcome {
    let a = Anonymizer::new(&r.stage2)?;
    let pairs = draw_pairs(&r.data, 100, r.cfg.eval.seed)?;
    let mut hits = 0;
    for &(ci, ji) in &pairs {
        let (c, j) = (&r.data.test[ci], &r.data.test[ji]);
        let (cp, jp) = (audio_path(&r.data, c), audio_path(&r.data, j));
        let synth = a.swap(&a.load_mel(cp)?, &a.load_mel(jp)?)?;
        let wav = a.vocode(&synth)?;
        let (fi, fj) = (read_metadata(cp)?.f0_hz, read_metadata(jp)?.f0_hz);
        if let Some(f) = estimate_f0(&wav.samples, wav.sample_rate_hz, 60.0, 500.0) {
            if (f.ln() - fj.ln()).abs() < (f.ln() - fi.ln()).abs() {
                hits += 1;
            }
        }
    }
    let rate = hits as f64 / pairs.len() as f64;
    a.verify_frozen()?;
    Ok((rate >= F0_SWAP_MIN, format!("{hits}/{} swaps pitched nearer the identity speaker, {rate:.2} >= {F0_SWAP_MIN}", pairs.len())))
}

fn reconstruction_error(r: &Reference) -> Outcome {
    let untrained = pipeline::untrained_checkpoint(&r.cfg, &r.data)?;
    let mae = |ckpt: &Checkpoint| -> Result<f64, Box<dyn Error>> {
        let a = Anonymizer::new(ckpt)?;
        let (mut sum, mut n) = (0.0, 0usize);
        for ex in r.data.train.iter().step_by(8) {
            let raw = a.load_mel(audio_path(&r.data, ex))?;
            let rec = a.reconstruct(&raw)?;
            let orig = a.normalized_input(&raw)?;
            sum += rec.values.data().iter().zip(orig.values.data()).map(|(x, y)| (x - y).abs()).sum::<f64>();
            n += rec.values.len();
        }
        Ok(sum / n as f64)
    };
    let (trained, baseline) = (mae(&r.stage2)?, mae(&untrained)?);
    Ok((
        trained < RECONSTRUCTION_MAE_BOUND,
        format!("train-split mean L1 {trained:.4} < {RECONSTRUCTION_MAE_BOUND} (untrained {baseline:.4})"),
    ))
}

fn stage1_descent(r: &Reference) -> Outcome {
    let losses: Vec<f64> = r.stage1.log.iter().filter(|e| e.stage == Stage::Stage1).map(|e| e.loss).collect();
    let worst = losses
        .windows(10)
        .map(|w| w.windows(2).filter(|p| p[1] > p[0]).count())
        .max()
        .unwrap_or(0);
    let (first, last) = (losses[0], *losses.last().unwrap());
    Ok((
        worst <= 1 && last <= first,
        format!("at most {worst} increase(s) in any 10-epoch window (<= 1); loss {first:.4} -> {last:.4}"),
    ))
}

fn stage2_targets(r: &Reference) -> Outcome {
    let same = r.stage2.latents == r.stage1.latents;
    Ok((same, format!("stage-2 checkpoint carries the stage-1 latent tables unchanged: {same}")))
}

fn embedding_only(r: &Reference) -> Outcome {
    let cfg = Stage2Config {
        lambda_3: 0.0,
        ..r.cfg.stage2.clone()
    };
    let ckpt = train_stage2(&r.data, &r.stage1, &cfg)?;
    let log: Vec<_> = ckpt.log.iter().filter(|e| e.stage == Stage::Stage2).collect();
    let (first, last) = (&log[0].components, &log.last().unwrap().components);
    let (rc, rs) = (last[0] / first[0], last[1] / first[1]);
    Ok((
        rc < EMBEDDING_ONLY_RATIO && rs < EMBEDDING_ONLY_RATIO,
        format!(
            "after {} epochs L_Ec ratio {rc:.3}, L_Es ratio {rs:.3} (each < {EMBEDDING_ONLY_RATIO})",
            cfg.epochs
        ),
    ))
}

fn oracle_separates_test_split(r: &Reference) -> Outcome {
    let acc = r.oracle.held_out_top1;
    let floor = r.oracle.cfg.floor;
    Ok((acc >= floor, format!("held-out top-1 {acc:.3} >= {floor}")))
}

fn main() {
    let start = Instant::now();
    let mut suite = Suite {
        total: 0,
        failed: Vec::new(),
    };
    suite.run("criterion 1 gradient correctness", gradient_correctness);
    suite.run("criterion 2 normalization algebra", normalization_algebra);
    suite.run("criterion 3 loss identities", loss_identities);

    let work = tempfile::tempdir().expect("temporary directory");
    suite.run("criterion 4 single-utterance memorization", || {
        let (cfg, data) = prepared(work.path())?;
        memorization(&data, &cfg)
    });

    let reference = catch_unwind(AssertUnwindSafe(|| reference_run(work.path()).map_err(|e| e.to_string())))
        .unwrap_or_else(|p| Err(format!("panic: {}", panic_text(&p))));
    suite.run("criterion 5 end-to-end anonymization", || end_to_end(trained(&reference)?));
    suite.run("criterion 6 disentanglement", || disentanglement(trained(&reference)?));
    suite.run("criterion 7 determinism and serialization", || determinism(trained(&reference)?));
    suite.run("criterion 8 degenerate swap", || degenerate_swap(trained(&reference)?));

    suite.run("check oracle gate", || oracle_separates_test_split(trained(&reference)?));
    suite.run("check swapped pitch follows identity", || f0_follows_identity(trained(&reference)?));
    suite.run("check reconstruction error", || reconstruction_error(trained(&reference)?));
    suite.run("check stage-1 descent", || stage1_descent(trained(&reference)?));
    suite.run("check stage-2 targets", || stage2_targets(trained(&reference)?));
    suite.run("check embedding-only regression", || embedding_only(trained(&reference)?));

    println!(
        "acceptance: {}/{} passed in {:.0} s",
        suite.total - suite.failed.len(),
        suite.total,
        start.elapsed().as_secs_f64()
    );
    if !suite.failed.is_empty() {
        println!("failed: {}", suite.failed.join(", "));
        std::process::exit(1);
    }
}
