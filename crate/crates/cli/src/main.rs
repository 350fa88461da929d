mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use saic_core::inference::{anonymize, AnonymizationRequest};
use saic_core::pipeline::{self, Evaluation, Freshness};
use saic_core::training::Stage;
use saic_core::SaicError;

use crate::config::ConfigError;

const EXIT_VALIDATION: u8 = 2;
const EXIT_MISSING: u8 = 3;
const EXIT_RUNTIME: u8 = 4;
const EXIT_THRESHOLD: u8 = 5;

#[derive(Parser)]
#[command(name = "saic", version, about = "Speech anonymization by identity swapping")]
struct Cli {
    /// JSON run config; omitted fields keep the reference defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config leaf, e.g. `--set stage1.epochs=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Derive every seed from this value.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic speaker corpus.
    SynthData,
    /// Split the corpus and cache normalized-ready mel crops.
    Prepare,
    /// Train one stage and write its checkpoint.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
    },
    /// Keep the content of one utterance and impose the voice of another.
    Anonymize {
        #[arg(long)]
        content: PathBuf,
        #[arg(long)]
        identity: PathBuf,
        /// Output WAV.
        #[arg(long)]
        out: PathBuf,
        /// Also write the synthesized mel tensor.
        #[arg(long)]
        mel: Option<PathBuf>,
        /// Also write an original / reconstructed / synthesized PNG.
        #[arg(long)]
        heatmap: Option<PathBuf>,
    },
    /// Score a trained checkpoint against every acceptance threshold.
    Evaluate,
    /// Write speaker and content embeddings of the test split as CSV.
    ExportEmbeddings,
    /// Print the fully resolved config as JSON.
    PrintConfig,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            let (category, code) = classify(&err);
            eprintln!("error[{category}]: {err:#}");
            ExitCode::from(code)
        }
    }
}

fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    if err.downcast_ref::<ConfigError>().is_some() {
        return ("validation", EXIT_VALIDATION);
    }
    match err.downcast_ref::<SaicError>() {
        Some(SaicError::InvalidConfig { .. }) | Some(SaicError::StageMismatch { .. }) => {
            ("validation", EXIT_VALIDATION)
        }
        Some(SaicError::MissingPrerequisite { .. }) | Some(SaicError::FingerprintMismatch { .. }) => {
            ("missing-prerequisite", EXIT_MISSING)
        }
        _ => ("runtime", EXIT_RUNTIME),
    }
}

fn run(cli: Cli) -> Result<u8> {
    let cfg = config::load(cli.config.as_deref(), &cli.sets, cli.seed)?;
    match cli.command {
        Command::SynthData => {
            let (m, fresh) = pipeline::synth_data(&cfg)?;
            let dir = cfg.workspace().corpus_dir();
            match fresh {
                Freshness::UpToDate => println!("up to date: {} ({} utterances)", dir.display(), m.records.len()),
                Freshness::Created => println!(
                    "generated {} utterances from {} speakers in {}",
                    m.records.len(),
                    m.speakers.len(),
                    dir.display()
                ),
            }
        }
        Command::Prepare => {
            let s = pipeline::prepare_data(&cfg)?;
            let ws = cfg.workspace();
            match s.freshness {
                Freshness::UpToDate => println!("up to date: {}", ws.manifest().display()),
                Freshness::Created => println!(
                    "prepared {} records ({} crops written) -> {}",
                    s.manifest.records.len(),
                    s.crops_written,
                    ws.manifest().display()
                ),
            }
        }
        Command::Train { stage } => {
            let data = pipeline::load_data(&cfg)?;
            let (ckpt, stage) = if stage == 1 {
                (pipeline::run_stage1(&cfg, &data)?, Stage::Stage1)
            } else {
                (pipeline::run_stage2(&cfg, &data)?, Stage::Stage2)
            };
            let last = ckpt.log.iter().rev().find(|r| r.stage == stage);
            let path = cfg.workspace().checkpoint(stage);
            match last {
                Some(r) => println!("{}: final loss {:.5} -> {}", stage.name(), r.loss, path.display()),
                None => println!("{}: no epochs run -> {}", stage.name(), path.display()),
            }
        }
        Command::Anonymize {
            content,
            identity,
            out,
            mel,
            heatmap,
        } => {
            let ckpt = pipeline::load_stage2(&cfg)?;
            let req = AnonymizationRequest {
                content_audio: content,
                identity_audio: identity,
                out_wav: Some(out.clone()),
                out_mel: mel,
                out_heatmap: heatmap,
            };
            let (synth, _) = anonymize(&ckpt, &req).context("anonymization failed")?;
            println!("wrote {} ({} frames)", out.display(), synth.frames());
        }
        Command::Evaluate => {
            let ev = pipeline::evaluate(&cfg)?;
            print_summary(&ev);
            println!("report: {}", cfg.workspace().report().display());
            if !ev.passed() {
                eprintln!("error[threshold]: one or more acceptance thresholds failed");
                return Ok(EXIT_THRESHOLD);
            }
        }
        Command::ExportEmbeddings => {
            let (spk, content) = pipeline::export(&cfg)?;
            println!("wrote {} and {}", spk.display(), content.display());
        }
        Command::PrintConfig => println!("{}", serde_json::to_string_pretty(&cfg)?),
    }
    Ok(0)
}

fn print_summary(ev: &Evaluation) {
    println!("{:<30} {:>8}  {:<22} {}", "metric", "value", "threshold", "result");
    for c in &ev.checks {
        println!(
            "{:<30} {:>8.4}  {:<22} {}",
            c.metric,
            c.value,
            c.threshold_text(),
            if c.passed { "PASS" } else { "FAIL" }
        );
    }
}
