//! Loss, AdamW, the warmup+cosine schedule, the training loop, and
//! checkpointing.
//!
//! All randomness (epoch shuffles, augmentation draws, dropout) is derived
//! from (seed, tag, counters), so a resumed run replays exactly the stream
//! an uninterrupted run would have used.

use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::augment::{augment_pipeline, AugmentConfig};
use crate::error::Error;
use crate::eval::{evaluate_prepared, EvalReport};
use crate::manifest::{DatasetManifest, SplitAssignment};
use crate::model::{Model, ModelConfig, NamedParam};
use crate::rng::{derive_rng, sample_rng};
use crate::skeleton::{normalize_sequence, resample_sequence};
use crate::tensor::serialize::{self, TensorRecord};
use crate::tensor::{Scalar, Tensor};
use rand::seq::SliceRandom;

fn default_base_lr() -> f64 {
    0.001
}
fn default_batch() -> usize {
    16
}
fn default_warmup() -> usize {
    5
}
fn default_decay() -> f64 {
    0.01
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    #[serde(default = "default_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub label_smoothing: f64,
    /// global-norm gradient clipping, off by default
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.base_lr <= 0.0 {
            return Err(Error::Config(format!("train.base_lr: {} must be positive", self.base_lr)));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("train.batch_size: must be >= 1".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "train.warmup_epochs: {} must be smaller than train.epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(0.0..=1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("train.label_smoothing: {} not in [0, 1]", self.label_smoothing)));
        }
        Ok(())
    }
}

/// Mean cross-entropy with optional label smoothing.
pub fn cross_entropy<E: Scalar>(logits: &Tensor<E>, labels: &[usize], smoothing: f64) -> Tensor<E> {
    logits.cross_entropy(labels, E::from_f64c(smoothing))
}

/// Linear warmup to `base_lr` over the warmup epochs, then cosine decay to
/// zero at the final step.
pub fn cosine_warmup_lr(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let warmup_steps = cfg.warmup_epochs * steps_per_epoch;
    let total_steps = cfg.epochs * steps_per_epoch;
    if step < warmup_steps {
        return cfg.base_lr * (step + 1) as f64 / warmup_steps as f64;
    }
    let denom = (total_steps - 1).saturating_sub(warmup_steps).max(1);
    let progress = ((step - warmup_steps) as f64 / denom as f64).min(1.0);
    cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// AdamW with decoupled weight decay. Decay touches only parameters tagged
/// `decay` in [`ModelParams::named`] (weight matrices; never biases, norms,
/// tokens, or the rpe table).
pub struct AdamW<E: Scalar> {
    pub m: Vec<Vec<E>>,
    pub v: Vec<Vec<E>>,
    pub step: usize,
}

impl<E: Scalar> AdamW<E> {
    pub fn new(params: &[NamedParam<E>]) -> Self {
        AdamW {
            m: params.iter().map(|p| vec![E::zero(); p.tensor.numel()]).collect(),
            v: params.iter().map(|p| vec![E::zero(); p.tensor.numel()]).collect(),
            step: 0,
        }
    }

    pub fn apply(&mut self, params: &[NamedParam<E>], lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = E::from_f64c(cfg.beta1);
        let b2 = E::from_f64c(cfg.beta2);
        let eps = E::from_f64c(cfg.eps);
        let lr_e = E::from_f64c(lr);
        let bc1 = E::one() - b1.powi(t);
        let bc2 = E::one() - b2.powi(t);
        for (i, p) in params.iter().enumerate() {
            let grad = p.tensor.grad();
            let mut data = p.tensor.data();
            let decay = if p.decay { E::from_f64c(lr * cfg.weight_decay) } else { E::zero() };
            for (j, g) in grad.iter().enumerate() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = b1 * *m + (E::one() - b1) * *g;
                *v = b2 * *v + (E::one() - b2) * *g * *g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                data[j] = data[j] - lr_e * m_hat / (v_hat.sqrt() + eps) - decay * data[j];
            }
            p.tensor.set_data(data);
        }
    }
}

/// A sample after load + normalize + resample, ready for batching.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub sample_id: String,
    pub signer_id: String,
    pub label: usize,
    pub seq: crate::skeleton::SkeletonSequence,
}

pub fn prepare_samples(
    manifest: &DatasetManifest,
    ids: &[String],
    t_len: usize,
) -> Result<Vec<Prepared>, Error> {
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let entry = manifest
            .sample(id)
            .ok_or_else(|| Error::Split(format!("sample {id} not in manifest")))?;
        let seq = manifest.load_sequence(entry)?;
        let seq = resample_sequence(&normalize_sequence(&seq), t_len);
        out.push(Prepared {
            sample_id: entry.sample_id.clone(),
            signer_id: entry.signer_id.clone(),
            label: entry.label,
            seq,
        });
    }
    Ok(out)
}

/// Stack prepared (optionally augmented) sequences into a `[B,T,V,C]` input.
pub fn batch_tensor<E: Scalar>(seqs: &[&crate::skeleton::SkeletonSequence]) -> Tensor<E> {
    let [t, v, c] = seqs[0].dims;
    let mut data = Vec::with_capacity(seqs.len() * t * v * c);
    for s in seqs {
        assert_eq!(s.dims, [t, v, c], "batch: ragged sample shapes");
        data.extend(s.frames.iter().map(|&x| E::from_f32c(x)));
    }
    Tensor::from_vec(&[seqs.len(), t, v, c], data)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_top1: f64,
    pub val_top5: f64,
}

#[derive(Debug)]
pub struct TrainReport {
    pub log: Vec<EpochLog>,
    pub best_val_top1: f64,
    pub final_step: usize,
    pub train_eval: EvalReport,
}

struct CheckpointMeta {
    step: usize,
    best_val_top1: f64,
}

pub fn save_checkpoint<E: Scalar>(
    model: &Model<E>,
    opt: &AdamW<E>,
    best_val_top1: f64,
    path: &Path,
) -> Result<(), Error> {
    let named = model.params.named();
    let mut records = model.params.to_records();
    for (kind, bufs) in [("m", &opt.m), ("v", &opt.v)] {
        for (p, buf) in named.iter().zip(bufs) {
            records.push(TensorRecord {
                name: format!("adam.{kind}.{}", p.name),
                shape: p.tensor.shape(),
                data: buf.iter().map(|x| x.to_f32c()).collect(),
            });
        }
    }
    let meta = serde_json::json!({ "step": opt.step, "best_val_top1": best_val_top1 });
    serialize::write_tensors_to_path(path, &records, meta)
}

fn load_checkpoint_into<E: Scalar>(path: &Path, model: &Model<E>, opt: &mut AdamW<E>) -> Result<CheckpointMeta, Error> {
    let (records, meta) = serialize::read_tensors_from_path(path)?;
    model.params.load_records(&records)?;
    let by_name: std::collections::HashMap<&str, &TensorRecord> =
        records.iter().map(|r| (r.name.as_str(), r)).collect();
    for (i, p) in model.params.named().iter().enumerate() {
        for (kind, bufs) in [("m", &mut opt.m), ("v", &mut opt.v)] {
            let name = format!("adam.{kind}.{}", p.name);
            let rec = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {name}")))?;
            bufs[i] = rec.data.iter().map(|&x| E::from_f32c(x)).collect();
        }
    }
    let step = meta["step"].as_u64().ok_or_else(|| Error::Checkpoint("missing step in meta".into()))? as usize;
    opt.step = step;
    let best_val_top1 = meta["best_val_top1"].as_f64().unwrap_or(0.0);
    Ok(CheckpointMeta { step, best_val_top1 })
}

/// Checkpoint sidecar: architecture plus the label vocabulary, so `predict`
/// needs no manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointSidecar {
    pub model: ModelConfig,
    pub labels: Vec<String>,
}

pub fn load_model_checkpoint(path: &Path) -> Result<(Model<f32>, Vec<String>), Error> {
    let sidecar_path = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join("config.json");
    let text = std::fs::read_to_string(&sidecar_path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", sidecar_path.display())))?;
    let sidecar: CheckpointSidecar = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: parse error: {e}", sidecar_path.display())))?;
    sidecar.model.validate()?;
    if sidecar.labels.len() != sidecar.model.num_classes {
        return Err(Error::Checkpoint(format!(
            "sidecar lists {} labels but model has {} classes",
            sidecar.labels.len(),
            sidecar.model.num_classes
        )));
    }
    let model = Model::<f32>::new(sidecar.model.clone(), 0);
    let (records, _) = serialize::read_tensors_from_path(path)?;
    model.params.load_records(&records)?;
    Ok((model, sidecar.labels))
}

pub struct FitOptions {
    pub out_dir: PathBuf,
    /// checkpoint to resume from; schedule continues at the stored step
    pub resume: Option<PathBuf>,
}

pub fn fit<E: Scalar>(
    manifest: &DatasetManifest,
    split: &SplitAssignment,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    aug_cfg: &AugmentConfig,
    opts: &FitOptions,
) -> Result<TrainReport, Error> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    aug_cfg.validate().map_err(Error::Config)?;
    split.validate(manifest)?;
    if split.train.is_empty() || split.val.is_empty() {
        return Err(Error::Train("empty train or val split part".into()));
    }
    std::fs::create_dir_all(&opts.out_dir)?;

    let train_set = prepare_samples(manifest, &split.train, model_cfg.t_len)?;
    let val_set = prepare_samples(manifest, &split.val, model_cfg.t_len)?;
    // same-label partner pools for joint mixing
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); manifest.num_classes()];
    for (i, p) in train_set.iter().enumerate() {
        pools[p.label].push(i);
    }

    let model = Model::<E>::new(model_cfg.clone(), train_cfg.seed);
    let named = model.params.named();
    let mut opt = AdamW::new(&named);
    let mut best_val_top1 = 0.0f64;
    let mut start_epoch = 0usize;
    let steps_per_epoch = train_set.len().div_ceil(train_cfg.batch_size);
    if let Some(resume_path) = &opts.resume {
        let meta = load_checkpoint_into(resume_path, &model, &mut opt)?;
        best_val_top1 = meta.best_val_top1;
        start_epoch = meta.step / steps_per_epoch;
    }

    let sidecar = CheckpointSidecar { model: model_cfg.clone(), labels: manifest.label_vocab.clone() };
    std::fs::write(opts.out_dir.join("config.json"), serde_json::to_string_pretty(&sidecar)?)?;
    let log_path = opts.out_dir.join("train_log.jsonl");
    let mut log_file = if start_epoch == 0 {
        std::fs::File::create(&log_path)?
    } else {
        std::fs::OpenOptions::new().create(true).append(true).open(&log_path)?
    };

    let mut log = Vec::new();
    for epoch in start_epoch..train_cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut derive_rng(train_cfg.seed, "shuffle", &[epoch as u64]));
        let mut epoch_loss = 0.0f64;
        let mut n_batches = 0usize;
        for chunk in order.chunks(train_cfg.batch_size) {
            let mut augmented = Vec::with_capacity(chunk.len());
            for &si in chunk {
                let p = &train_set[si];
                let mut rng = sample_rng(train_cfg.seed, &p.sample_id, epoch as u64);
                let pool: Vec<&crate::skeleton::SkeletonSequence> = pools[p.label]
                    .iter()
                    .filter(|&&j| j != si || pools[p.label].len() == 1)
                    .map(|&j| &train_set[j].seq)
                    .collect();
                augmented.push(augment_pipeline(&p.seq, &pool, aug_cfg, &mut rng));
            }
            let refs: Vec<&crate::skeleton::SkeletonSequence> = augmented.iter().collect();
            let frames = batch_tensor::<E>(&refs);
            let labels: Vec<usize> = chunk.iter().map(|&si| train_set[si].label).collect();
            let mut dropout_rng = (model_cfg.dropout > 0.0)
                .then(|| derive_rng(train_cfg.seed, "dropout", &[epoch as u64, n_batches as u64]));
            let logits = model.forward_with(&frames, None, dropout_rng.as_mut());
            let loss = cross_entropy(&logits, &labels, train_cfg.label_smoothing);
            let loss_val = loss.item().to_f64c();
            if !loss_val.is_finite() {
                let ids: Vec<&str> = chunk.iter().map(|&si| train_set[si].sample_id.as_str()).collect();
                return Err(Error::Train(format!(
                    "non-finite loss {loss_val} at epoch {epoch}, step {}; batch samples: {ids:?}",
                    opt.step
                )));
            }
            for p in &named {
                p.tensor.zero_grad();
            }
            loss.backward();
            if let Some(max_norm) = train_cfg.grad_clip {
                clip_grad_norm(&named, max_norm);
            }
            let lr = cosine_warmup_lr(opt.step, steps_per_epoch, train_cfg);
            opt.apply(&named, lr, train_cfg);
            epoch_loss += loss_val;
            n_batches += 1;
        }
        let val_report = evaluate_prepared(&model, &val_set, train_cfg.batch_size, &manifest.label_vocab)?;
        let row = EpochLog {
            epoch,
            lr: cosine_warmup_lr(opt.step.saturating_sub(1), steps_per_epoch, train_cfg),
            train_loss: epoch_loss / n_batches.max(1) as f64,
            val_top1: val_report.top1,
            val_top5: val_report.top5,
        };
        writeln!(log_file, "{}", serde_json::to_string(&row)?)?;
        log.push(row);
        save_checkpoint(&model, &opt, best_val_top1, &opts.out_dir.join("last.ckpt"))?;
        if val_report.top1 > best_val_top1 || (epoch == start_epoch && !opts.out_dir.join("best.ckpt").exists()) {
            best_val_top1 = best_val_top1.max(val_report.top1);
            save_checkpoint(&model, &opt, best_val_top1, &opts.out_dir.join("best.ckpt"))?;
        }
    }
    // evaluation never augments; report train-set accuracy on clean inputs
    let train_eval = evaluate_prepared(&model, &train_set, train_cfg.batch_size, &manifest.label_vocab)?;
    Ok(TrainReport { log, best_val_top1, final_step: opt.step, train_eval })
}

fn clip_grad_norm<E: Scalar>(params: &[NamedParam<E>], max_norm: f64) {
    let mut total = 0.0f64;
    for p in params {
        for g in p.tensor.grad() {
            let g = g.to_f64c();
            total += g * g;
        }
    }
    let norm = total.sqrt();
    if norm > max_norm {
        let scale = E::from_f64c(max_norm / norm);
        for p in params {
            let scaled: Vec<E> = p.tensor.grad().iter().map(|&g| g * scale).collect();
            p.tensor.set_grad(scaled);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            base_lr: 0.001,
            batch_size: 16,
            epochs,
            warmup_epochs: 5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            label_smoothing: 0.0,
            grad_clip: None,
        }
    }

    #[test]
    fn schedule_boundaries() {
        let c = cfg(10);
        let spe = 4;
        // last warmup step reaches exactly base_lr
        assert_eq!(cosine_warmup_lr(5 * spe - 1, spe, &c), c.base_lr);
        // cosine midpoint gives base_lr / 2
        let warmup = 5 * spe;
        let total = 10 * spe;
        let mid = warmup + (total - 1 - warmup) / 2;
        // denom is odd here; evaluate the exact formula instead of assuming 0.5
        let denom = (total - 1 - warmup) as f64;
        let expect = c.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * (mid - warmup) as f64 / denom).cos());
        assert!((cosine_warmup_lr(mid, spe, &c) - expect).abs() < 1e-15);
        // final step decays to (numerically) zero
        assert!(cosine_warmup_lr(total - 1, spe, &c) <= c.base_lr * 1e-6);
    }

    #[test]
    fn schedule_matches_direct_evaluation_and_is_continuous() {
        let c = cfg(10);
        let spe = 4;
        let warmup = c.warmup_epochs * spe;
        let total = c.epochs * spe;
        let mut prev = 0.0f64;
        for step in 0..total {
            // independent direct evaluation
            let expect = if step < warmup {
                c.base_lr * (step + 1) as f64 / warmup as f64
            } else {
                let p = (step - warmup) as f64 / (total - 1 - warmup) as f64;
                c.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
            };
            let got = cosine_warmup_lr(step, spe, &c);
            assert!((got - expect).abs() < 1e-12, "step {step}: {got} vs {expect}");
            if step > 0 {
                let bound = c.base_lr / warmup as f64
                    + c.base_lr * std::f64::consts::PI / (2.0 * (total - warmup) as f64);
                assert!((got - prev).abs() <= bound + 1e-12, "jump at step {step}");
            }
            prev = got;
        }
    }

    #[test]
    fn adamw_zero_grad_identity_and_decay() {
        let cfg_t = cfg(10);
        let w = Tensor::<f64>::param(&[2], vec![1.0, -3.0]);
        let params = vec![NamedParam { name: "w".into(), tensor: w.clone(), decay: false }];
        let mut opt = AdamW::new(&params);
        opt.apply(&params, 0.1, &cfg_t);
        assert_eq!(w.data(), vec![1.0, -3.0]);

        // decoupled decay with zero grad scales by exactly (1 - lr*lambda)
        let params = vec![NamedParam { name: "w".into(), tensor: w.clone(), decay: true }];
        let mut opt = AdamW::new(&params);
        opt.apply(&params, 0.1, &cfg_t);
        assert_eq!(w.data(), vec![1.0 * (1.0 - 0.001), -3.0 * (1.0 - 0.001)]);
    }

    #[test]
    fn adamw_matches_scalar_reference_trajectory() {
        // optimize f(w) = w^2 from w = 1 with lr 0.1 for 10 steps
        let c = TrainConfig { weight_decay: 0.0, ..cfg(10) };
        let w = Tensor::<f64>::param(&[1], vec![1.0]);
        let params = vec![NamedParam { name: "w".into(), tensor: w.clone(), decay: true }];
        let mut opt = AdamW::new(&params);

        // independent scalar reimplementation
        let (mut rw, mut rm, mut rv) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=10 {
            let loss = w.mul(&w).sum_all();
            w.zero_grad();
            loss.backward();
            opt.apply(&params, 0.1, &c);

            let g = 2.0 * rw;
            rm = 0.9 * rm + 0.1 * g;
            rv = 0.999 * rv + 0.001 * g * g;
            let mh = rm / (1.0 - 0.9f64.powi(t));
            let vh = rv / (1.0 - 0.999f64.powi(t));
            rw -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((w.data()[0] - rw).abs() < 1e-12, "step {t}: {} vs {rw}", w.data()[0]);
        }
    }

    #[test]
    fn decay_set_is_exactly_the_weight_matrices() {
        let mc = ModelConfig {
            t_len: 2,
            joints: 2,
            in_channels: 2,
            c_emb: 4,
            heads: 2,
            blocks: 1,
            ffn_ratio: 2,
            rpe_clip: 2,
            scale_attention: true,
            dropout: 0.0,
            num_classes: 2,
        };
        let params = init_params::<f32>(&mc, 0);
        for p in params.named() {
            let is_matrix = p.name.ends_with(".w") && p.tensor.shape().len() == 2;
            assert_eq!(p.decay, is_matrix, "{}: decay={} shape={:?}", p.name, p.decay, p.tensor.shape());
        }
    }
}
