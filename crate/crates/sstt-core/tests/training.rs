//! End-to-end training-loop behaviour on tiny synthetic corpora: logging,
//! determinism, checkpoint round-trips, and resume.

use std::path::Path;

use sstt_core::augment::AugmentConfig;
use sstt_core::manifest::{load_manifest, make_split};
use sstt_core::model::ModelConfig;
use sstt_core::synth::{generate_corpus, SynthConfig};
use sstt_core::train::{fit, FitOptions, TrainConfig};

fn tiny_corpus(dir: &Path) -> (sstt_core::manifest::DatasetManifest, sstt_core::manifest::SplitAssignment) {
    let cfg = SynthConfig { classes: 2, samples_per_class: 5, signers: 5, frames: 8, joints: 3, seed: 0 };
    generate_corpus(&cfg, dir).unwrap();
    let manifest = load_manifest(&dir.join("manifest.json")).unwrap();
    let split = make_split(&manifest, (0.6, 0.2, 0.2), 0).unwrap();
    (manifest, split)
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        t_len: 8,
        joints: 3,
        in_channels: 2,
        c_emb: 8,
        heads: 2,
        blocks: 1,
        ffn_ratio: 2,
        rpe_clip: 4,
        scale_attention: true,
        dropout: 0.0,
        num_classes: 2,
    }
}

fn tiny_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        base_lr: 0.001,
        batch_size: 4,
        epochs,
        warmup_epochs: 1,
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
fn fit_writes_log_rows_and_advances_steps() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, split) = tiny_corpus(dir.path());
    let out = dir.path().join("run");
    let report = fit::<f32>(
        &manifest,
        &split,
        &tiny_model(),
        &tiny_train(3),
        &AugmentConfig::default(),
        &FitOptions { out_dir: out.clone(), resume: None },
    )
    .unwrap();
    assert_eq!(report.log.len(), 3);
    let spe = split.train.len().div_ceil(4);
    assert_eq!(report.final_step, 3 * spe);
    for (e, row) in report.log.iter().enumerate() {
        assert_eq!(row.epoch, e);
        assert!(row.train_loss.is_finite());
    }
    // log file has the same three rows
    let text = std::fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(out.join("best.ckpt").exists());
    assert!(out.join("last.ckpt").exists());
    assert!(out.join("config.json").exists());
}

#[test]
fn same_seed_gives_identical_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, split) = tiny_corpus(dir.path());
    let run = |out: &Path| {
        fit::<f32>(
            &manifest,
            &split,
            &tiny_model(),
            &tiny_train(3),
            &AugmentConfig::default(),
            &FitOptions { out_dir: out.to_path_buf(), resume: None },
        )
        .unwrap()
    };
    let a = run(&dir.path().join("a"));
    let b = run(&dir.path().join("b"));
    for (ra, rb) in a.log.iter().zip(&b.log) {
        assert_eq!(ra.train_loss, rb.train_loss);
        assert_eq!(ra.val_top1, rb.val_top1);
    }
    let la = std::fs::read(dir.path().join("a/train_log.jsonl")).unwrap();
    let lb = std::fs::read(dir.path().join("b/train_log.jsonl")).unwrap();
    assert_eq!(la, lb);
    let ca = std::fs::read(dir.path().join("a/last.ckpt")).unwrap();
    let cb = std::fs::read(dir.path().join("b/last.ckpt")).unwrap();
    assert_eq!(ca, cb);
}

#[test]
fn resume_matches_uninterrupted_run_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, split) = tiny_corpus(dir.path());
    // batch >= train size so one epoch is exactly one step
    let mut tc = tiny_train(3);
    tc.batch_size = split.train.len();

    let full = dir.path().join("full");
    fit::<f32>(&manifest, &split, &tiny_model(), &tc, &AugmentConfig::default(),
        &FitOptions { out_dir: full.clone(), resume: None }).unwrap();

    let mut tc2 = tc.clone();
    tc2.epochs = 2;
    // warmup must stay below epochs for the partial run
    tc2.warmup_epochs = 1;
    let part = dir.path().join("part");
    fit::<f32>(&manifest, &split, &tiny_model(), &tc2, &AugmentConfig::default(),
        &FitOptions { out_dir: part.clone(), resume: None }).unwrap();
    // resume the partial run under the full schedule for the last epoch
    let resumed = dir.path().join("resumed");
    fit::<f32>(&manifest, &split, &tiny_model(), &tc, &AugmentConfig::default(),
        &FitOptions { out_dir: resumed.clone(), resume: Some(part.join("last.ckpt")) }).unwrap();

    let a = std::fs::read(full.join("last.ckpt")).unwrap();
    let b = std::fs::read(resumed.join("last.ckpt")).unwrap();
    assert_eq!(a, b, "resumed checkpoint differs from uninterrupted run");
}

#[test]
fn save_load_save_is_byte_identical_and_rejects_wrong_classes() {
    use sstt_core::model::{init_params, Model};
    use sstt_core::train::{save_checkpoint, AdamW};

    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_model();
    let model = Model::<f32> { cfg: cfg.clone(), params: init_params(&cfg, 7) };
    let opt = AdamW::new(&model.params.named());
    let p1 = dir.path().join("a.ckpt");
    save_checkpoint(&model, &opt, 0.5, &p1).unwrap();

    let model2 = Model::<f32> { cfg: cfg.clone(), params: init_params(&cfg, 99) };
    let mut opt2 = AdamW::new(&model2.params.named());
    // load via the public fit resume path: use the serialize layer directly
    let (records, _) = sstt_core::tensor::serialize::read_tensors_from_path(&p1).unwrap();
    model2.params.load_records(&records).unwrap();
    for (i, p) in model2.params.named().iter().enumerate() {
        for (kind, bufs) in [("m", &mut opt2.m), ("v", &mut opt2.v)] {
            let rec = records.iter().find(|r| r.name == format!("adam.{kind}.{}", p.name)).unwrap();
            bufs[i] = rec.data.clone();
        }
    }
    let p2 = dir.path().join("b.ckpt");
    save_checkpoint(&model2, &opt2, 0.5, &p2).unwrap();
    // meta step differs (opt2.step was never advanced past 0, same as opt) —
    // both are fresh, so the files must match byte for byte
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

    let wrong = ModelConfig { num_classes: 5, ..cfg };
    let model3 = Model::<f32> { cfg: wrong.clone(), params: init_params(&wrong, 0) };
    let err = model3.params.load_records(&records).unwrap_err();
    let msg = format!("{err}");
    assert!(msg.contains("shape"), "unexpected error: {msg}");
}

#[test]
fn loss_strictly_decreases_on_fixed_batch() {
    use sstt_core::model::{init_params, Model};
    use sstt_core::train::{batch_tensor, cosine_warmup_lr, cross_entropy, prepare_samples, AdamW};

    let dir = tempfile::tempdir().unwrap();
    let (manifest, split) = tiny_corpus(dir.path());
    let mc = tiny_model();
    let tc = tiny_train(10);
    let train = prepare_samples(&manifest, &split.train, mc.t_len).unwrap();
    let refs: Vec<_> = train.iter().map(|p| &p.seq).collect();
    let frames = batch_tensor::<f32>(&refs);
    let labels: Vec<usize> = train.iter().map(|p| p.label).collect();

    let model = Model::<f32> { cfg: mc.clone(), params: init_params(&mc, 0) };
    let named = model.params.named();
    let mut opt = AdamW::new(&named);
    let mut prev = f64::INFINITY;
    for _ in 0..5 {
        let loss = cross_entropy(&model.forward(&frames), &labels, 0.0);
        let v = loss.item() as f64;
        assert!(v < prev, "loss did not decrease: {v} vs {prev}");
        prev = v;
        for p in &named {
            p.tensor.zero_grad();
        }
        loss.backward();
        let lr = cosine_warmup_lr(opt.step, 1, &tc);
        opt.apply(&named, lr, &tc);
    }
}

#[test]
fn empty_split_part_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, mut split) = tiny_corpus(dir.path());
    split.val.clear();
    let err = fit::<f32>(
        &manifest,
        &split,
        &tiny_model(),
        &tiny_train(2),
        &AugmentConfig::default(),
        &FitOptions { out_dir: dir.path().join("out"), resume: None },
    )
    .unwrap_err();
    assert!(format!("{err}").contains("split"), "unexpected error: {err}");
}
