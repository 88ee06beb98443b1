//! `sstt` — train/eval/predict on skeleton sequences, plus a synthetic
//! corpus generator. Exit codes: 0 ok, 1 runtime failure, 2 config error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use sstt_core::augment::AugmentConfig;
use sstt_core::error::Error;
use sstt_core::eval::evaluate_prepared;
use sstt_core::manifest::{load_manifest, make_split, DatasetManifest, SplitAssignment};
use sstt_core::model::ModelConfig;
use sstt_core::skeleton::{normalize_sequence, resample_sequence, SkeletonSequence};
use sstt_core::synth::{generate_corpus, SynthConfig};
use sstt_core::train::{fit, load_model_checkpoint, prepare_samples, FitOptions, TrainConfig};

#[derive(Parser)]
#[command(name = "sstt", version, about = "Stack spatial-temporal transformer for skeleton sign sequences")]
struct Cli {
    /// single thread, fixed reduction order
    #[arg(long, global = true)]
    deterministic: bool,
    /// worker threads for the tensor kernel
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a JSON run config
    Train {
        #[arg(long)]
        config: PathBuf,
        /// checkpoint to resume from
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split part
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long, value_parser = ["train", "val", "test"])]
        part: String,
    },
    /// Classify one keypoint file
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 5)]
        topk: usize,
    },
    /// Generate a deterministic synthetic corpus
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        samples_per_class: usize,
        #[arg(long)]
        signers: usize,
        #[arg(long)]
        frames: usize,
        #[arg(long)]
        joints: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Architecture knobs that don't depend on the dataset; the rest of
/// [`ModelConfig`] (joints, channels, classes, t_len) is resolved from the
/// manifest and the data section.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArchConfig {
    c_emb: usize,
    heads: usize,
    blocks: usize,
    #[serde(default = "default_ffn_ratio")]
    ffn_ratio: usize,
    #[serde(default = "default_rpe_clip")]
    rpe_clip: usize,
    #[serde(default = "default_true")]
    scale_attention: bool,
    #[serde(default)]
    dropout: f32,
}

fn default_ffn_ratio() -> usize {
    4
}
fn default_rpe_clip() -> usize {
    64
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DataConfig {
    manifest_path: PathBuf,
    #[serde(default)]
    split_path: Option<PathBuf>,
    #[serde(default)]
    split_seed: Option<u64>,
    t_len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunConfig {
    model: ArchConfig,
    train: TrainConfig,
    #[serde(default)]
    augment: AugmentConfig,
    data: DataConfig,
    output_dir: PathBuf,
}

fn load_run_config(path: &Path) -> Result<RunConfig, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    match (&cfg.data.split_path, &cfg.data.split_seed) {
        (Some(_), Some(_)) => {
            return Err(Error::Config("data: set exactly one of split_path / split_seed, got both".into()))
        }
        (None, None) => {
            return Err(Error::Config("data: set exactly one of split_path / split_seed, got neither".into()))
        }
        _ => {}
    }
    Ok(cfg)
}

fn resolve_model_cfg(arch: &ArchConfig, data: &DataConfig, manifest: &DatasetManifest) -> Result<ModelConfig, Error> {
    let cfg = ModelConfig {
        t_len: data.t_len,
        joints: manifest.joint_count,
        in_channels: manifest.channels,
        c_emb: arch.c_emb,
        heads: arch.heads,
        blocks: arch.blocks,
        ffn_ratio: arch.ffn_ratio,
        rpe_clip: arch.rpe_clip,
        scale_attention: arch.scale_attention,
        dropout: arch.dropout,
        num_classes: manifest.num_classes(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_split(data: &DataConfig, manifest: &DatasetManifest) -> Result<SplitAssignment, Error> {
    let split = match (&data.split_path, data.split_seed) {
        (Some(p), _) => SplitAssignment::load(p)?,
        (None, Some(seed)) => make_split(manifest, (0.6, 0.2, 0.2), seed)?,
        (None, None) => unreachable!("validated in load_run_config"),
    };
    split.validate(manifest)?;
    Ok(split)
}

fn cmd_train(config_path: &Path, resume: Option<PathBuf>) -> Result<(), Error> {
    let cfg = load_run_config(config_path)?;
    cfg.train.validate()?;
    cfg.augment.validate().map_err(Error::Config)?;
    let manifest = load_manifest(&cfg.data.manifest_path)?;
    let model_cfg = resolve_model_cfg(&cfg.model, &cfg.data, &manifest)?;
    let split = load_split(&cfg.data, &manifest)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    // resolved-config copy so a run directory is self-describing
    std::fs::write(cfg.output_dir.join("run_config.json"), serde_json::to_string_pretty(&cfg)?)?;
    split.save(&cfg.output_dir.join("split.json"))?;
    let report = fit::<f32>(
        &manifest,
        &split,
        &model_cfg,
        &cfg.train,
        &cfg.augment,
        &FitOptions { out_dir: cfg.output_dir.clone(), resume },
    )?;
    println!(
        "{}",
        serde_json::json!({
            "epochs": report.log.len(),
            "final_step": report.final_step,
            "best_val_top1": report.best_val_top1,
            "train_top1": report.train_eval.top1,
        })
    );
    Ok(())
}

fn cmd_eval(checkpoint: &Path, manifest_path: &Path, split_path: &Path, part: &str) -> Result<(), Error> {
    let (model, labels) = load_model_checkpoint(checkpoint)?;
    let manifest = load_manifest(manifest_path)?;
    if manifest.label_vocab != labels {
        return Err(Error::Eval(format!(
            "label vocabulary mismatch: checkpoint has {} classes, manifest {}",
            labels.len(),
            manifest.num_classes()
        )));
    }
    if manifest.joint_count != model.cfg.joints || manifest.channels != model.cfg.in_channels {
        return Err(Error::Config(format!(
            "manifest geometry {}x{} does not match model {}x{}",
            manifest.joint_count, manifest.channels, model.cfg.joints, model.cfg.in_channels
        )));
    }
    let split = SplitAssignment::load(split_path)?;
    split.validate(&manifest)?;
    let ids = split
        .part(part)
        .ok_or_else(|| Error::Config(format!("unknown split part {part:?}")))?;
    let samples = prepare_samples(&manifest, ids, model.cfg.t_len)?;
    let report = evaluate_prepared(&model, &samples, 32, &manifest.label_vocab)?;
    let json = serde_json::to_string_pretty(&report)?;
    let out = checkpoint.parent().unwrap_or_else(|| Path::new(".")).join("eval_report.json");
    std::fs::write(&out, &json)?;
    println!("{json}");
    Ok(())
}

fn cmd_predict(checkpoint: &Path, input: &Path, topk: usize) -> Result<(), Error> {
    let (model, labels) = load_model_checkpoint(checkpoint)?;
    let seq = SkeletonSequence::read_keypoints(input, String::new(), String::new(), 0)?;
    if seq.dims[1] != model.cfg.joints || seq.dims[2] != model.cfg.in_channels {
        return Err(Error::Config(format!(
            "sample geometry {}x{} does not match model {}x{}",
            seq.dims[1], seq.dims[2], model.cfg.joints, model.cfg.in_channels
        )));
    }
    let seq = resample_sequence(&normalize_sequence(&seq), model.cfg.t_len);
    let frames = sstt_core::train::batch_tensor::<f32>(&[&seq]);
    let logits = model.forward(&frames).data();
    // stable softmax over the single row
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|&x| ((x - max) as f64).exp()).collect();
    let z: f64 = exps.iter().sum();
    let mut ranked: Vec<(usize, f64)> = exps.iter().map(|e| e / z).enumerate().collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let rows: Vec<_> = ranked
        .iter()
        .take(topk.min(labels.len()))
        .map(|&(i, p)| serde_json::json!({ "label": labels[i], "prob": p }))
        .collect();
    println!("{}", serde_json::to_string_pretty(&rows)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = if cli.deterministic { 1 } else { cli.threads.unwrap_or_else(num_threads) };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .ok();
    let result = match &cli.cmd {
        Cmd::Train { config, resume } => cmd_train(config, resume.clone()),
        Cmd::Eval { checkpoint, manifest, split, part } => cmd_eval(checkpoint, manifest, split, part),
        Cmd::Predict { checkpoint, input, topk } => cmd_predict(checkpoint, input, *topk),
        Cmd::Synth { out, classes, samples_per_class, signers, frames, joints, seed } => {
            let cfg = SynthConfig {
                classes: *classes,
                samples_per_class: *samples_per_class,
                signers: *signers,
                frames: *frames,
                joints: *joints,
                seed: *seed,
            };
            generate_corpus(&cfg, out).map(|file| {
                println!(
                    "{}",
                    serde_json::json!({ "samples": file.samples.len(), "classes": file.labels.len() })
                );
            })
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn num_threads() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}
