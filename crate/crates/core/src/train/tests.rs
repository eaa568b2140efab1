use super::*;
use crate::checkpoint::Checkpoint;
use crate::data::synth::{synth_samples, SynthSpec};
use crate::data::{batches, Sample};
use crate::losses::{KdProjectors, LossConfig};
use crate::scalar::{Precision, Scalar};
use crate::vlm::{Vlm, VlmConfig};

fn student_cfg() -> VlmConfig {
    VlmConfig { d_model: 16, n_heads: 2, n_layers: 2, vocab_size: 64, ..VlmConfig::student() }
}

fn teacher_cfg() -> VlmConfig {
    VlmConfig { d_model: 24, n_heads: 3, n_layers: 3, seed: 9, ..student_cfg() }
}

fn data(n: usize, seed: u64) -> Vec<Sample> {
    synth_samples(&SynthSpec { n_samples: n, seed, ..SynthSpec::default() }).unwrap()
}

fn train_cfg<S: Scalar>(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 2,
        lr_other_max: 1e-3,
        lr_finetune_max: 2e-3,
        precision: Precision::of::<S>(),
        ..TrainConfig::default()
    }
}

fn kd_trainer<S: Scalar>(train: TrainConfig, losses: LossConfig) -> Trainer<S> {
    let teacher = Teacher::new(Vlm::new(&teacher_cfg()).unwrap(), None).unwrap();
    Trainer::new(Vlm::new(&student_cfg()).unwrap(), Some(teacher), train, losses).unwrap()
}

fn kd_losses() -> LossConfig {
    LossConfig { k: 4, ..LossConfig::default() }
}

#[test]
fn cosine_schedule_examples() {
    assert_eq!(cosine_lr(10, 1e-3, 100, 10).unwrap(), 1e-3);
    assert!(cosine_lr(100, 1e-3, 100, 10).unwrap().abs() < 1e-18);
    assert!((cosine_lr(55, 1e-3, 100, 10).unwrap() - 0.5e-3).abs() < 1e-15);
    assert_eq!(cosine_lr(5, 1e-3, 100, 10).unwrap(), 0.5e-3);
    assert_eq!(cosine_lr(0, 1e-3, 100, 0).unwrap(), 1e-3);
    assert!(matches!(cosine_lr(0, 1e-3, 10, 10), Err(Error::BadSchedule(_))));
    assert!(matches!(cosine_lr(11, 1e-3, 10, 1), Err(Error::BadSchedule(_))));
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig { accumulation_steps: 0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { warmup_frac: 0.6, ..TrainConfig::default() }.validate().is_err());
    assert_eq!(TrainConfig { batch_size: 3, accumulation_steps: 4, ..TrainConfig::default() }.effective_batch(), 12);
    let d = TrainConfig::default();
    assert_eq!((d.lr_projector_max, d.lr_other_max, d.lr_finetune_max), (1e-3, 2e-5, 4e-5));
}

#[test]
fn kd_without_teacher_is_rejected() {
    let r = Trainer::<f32>::new(Vlm::new(&student_cfg()).unwrap(), None, train_cfg::<f32>(1), LossConfig::default());
    assert!(matches!(r, Err(Error::Config(_))));
    let wrong_precision = Trainer::<f32>::new(
        Vlm::new(&student_cfg()).unwrap(),
        None,
        TrainConfig { precision: Precision::F64, ..train_cfg::<f32>(1) },
        LossConfig::sup_only(),
    );
    assert!(wrong_precision.is_err());
}

#[test]
fn baseline_path_skips_teacher() {
    let mut t = kd_trainer::<f32>(train_cfg::<f32>(3), LossConfig::sup_only());
    let d = data(12, 1);
    for r in t.fit(&d, None).unwrap().reports {
        assert_eq!(r.total, r.l_sup);
        assert_eq!((r.l_attn_tv, r.l_v, r.l_rkld), (0.0, 0.0, 0.0));
    }
    assert_eq!(t.teacher.as_ref().unwrap().forwards, 0);
}

#[test]
fn self_distillation_is_null() {
    let cfg = student_cfg();
    let student = Vlm::<f64>::new(&cfg).unwrap();
    let teacher = Teacher::new(student.deep_clone().unwrap(), None).unwrap();
    let losses = LossConfig { k: 4, rkld_floor: 0.0, attn_block: crate::losses::AttnBlock::AllPlusLast, ..LossConfig::default() };
    let mut t = Trainer::new(student, Some(teacher), train_cfg::<f64>(1), losses).unwrap();
    let ident = KdProjectors::identity(&cfg);
    let proj = t.proj.as_ref().unwrap();
    for ((_, dst), (_, src)) in proj.named().iter().zip(ident.named()) {
        dst.data_mut().copy_from_slice(&src.data());
    }
    let b = batches(&data(4, 2), 4, 0).unwrap();
    let r = t.train_step(&b[0]).unwrap();
    assert_eq!((r.l_attn_tv, r.l_v, r.l_rkld), (0.0, 0.0, 0.0));
    assert!(r.l_sup > 0.0);
}

#[test]
fn reports_satisfy_identities_and_teacher_is_memoised() {
    let mut t = kd_trainer::<f32>(TrainConfig { steps: 4, ..train_cfg::<f32>(4) }, kd_losses());
    let d = data(4, 3);
    let out = t.fit(&d, None).unwrap();
    for r in &out.reports {
        assert!(r.identity_error(0.1) <= 1e-6);
        assert!(r.l_attn_tv > 0.0 && r.l_v_all > 0.0 && r.l_v_focus > 0.0 && r.l_rkld > 0.0);
        assert_eq!(r.focus_indices.len(), 4);
    }
    let teacher = t.teacher.as_ref().unwrap();
    assert_eq!(teacher.memo_len(), 4);
    assert_eq!(teacher.forwards, 2);
}

fn max_abs_diff<S: Scalar>(a: &Vlm<S>, b: &Vlm<S>) -> f64 {
    a.named_tensors()
        .iter()
        .zip(b.named_tensors())
        .flat_map(|(x, y)| x.tensor.to_f64_vec().into_iter().zip(y.tensor.to_f64_vec()).map(|(p, q)| (p - q).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max)
}

#[test]
fn accumulation_matches_combined_batch() {
    let d = data(24, 4);
    let run = |bs: usize, acc: usize| {
        let cfg = TrainConfig { batch_size: bs, accumulation_steps: acc, ..train_cfg::<f64>(6) };
        let mut t = kd_trainer::<f64>(cfg, kd_losses());
        t.fit(&d, None).unwrap();
        t
    };
    let (a, b) = (run(2, 4), run(8, 1));
    let diff = max_abs_diff(&a.model, &b.model);
    assert!(diff <= 1e-6, "{diff}");
    assert!(max_abs_diff(&a.model, &Vlm::new(&student_cfg()).unwrap()) > 1e-4);
}

#[test]
fn learning_rate_groups() {
    for (stage, other) in [(Stage::Pretrain, 1e-3), (Stage::Finetune, 2e-3)] {
        let cfg = TrainConfig { stage, lr_projector_max: 5e-3, warmup_frac: 0.0, ..train_cfg::<f64>(4) };
        let mut t = kd_trainer::<f64>(cfg, kd_losses());
        let before: Vec<(String, Vec<f64>, LrGroup)> = t.opt.params().map(|(n, p, g)| (n.to_string(), p.to_f64_vec(), g)).collect();
        t.run_step(&data(8, 5)).unwrap();
        let want_proj = cosine_lr(1, 5e-3, 4, 0).unwrap();
        let want_other = cosine_lr(1, other, 4, 0).unwrap();
        assert_eq!(t.opt.last_lr[&LrGroup::Projector], want_proj);
        assert_eq!(t.opt.last_lr[&LrGroup::Other], want_other);
        // The first Adam update moves each coordinate by about the group rate.
        for ((name, old, group), (_, p, _)) in before.iter().zip(t.opt.params()) {
            let want = if *group == LrGroup::Projector { want_proj } else { want_other };
            let max_step = old.iter().zip(p.to_f64_vec()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if max_step > 0.0 {
                assert!((max_step - want).abs() <= 0.01 * want, "{name}: {max_step} vs {want}");
            }
        }
        let grouped: Vec<&str> = t.opt.params().filter(|(_, _, g)| *g == LrGroup::Projector).map(|(n, _, _)| n).collect();
        assert!(grouped.contains(&"projector.weight") && grouped.contains(&"kd.attn.weight") && grouped.contains(&"kd.embed.weight"));
        assert!(!grouped.iter().any(|n| n.starts_with("layers.")));
    }
}

#[test]
fn frozen_tensors_never_change() {
    let mut t = kd_trainer::<f32>(train_cfg::<f32>(5), kd_losses());
    let frozen: Vec<Vec<f32>> = t.model.frozen().iter().map(|p| p.tensor.to_vec()).collect();
    let teacher_before = t.teacher.as_ref().unwrap().model.to_checkpoint(Precision::F32).to_bytes();
    t.fit(&data(10, 6), None).unwrap();
    for (p, old) in t.model.frozen().iter().zip(&frozen) {
        assert!(p.tensor.to_vec().iter().zip(old).all(|(a, b)| a.to_bits() == b.to_bits()), "{}", p.name);
    }
    assert!(t.teacher.as_ref().unwrap().model.to_checkpoint(Precision::F32).to_bytes() == teacher_before);
}

#[test]
fn runs_are_deterministic_and_resumable() {
    let d = data(16, 7);
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let cfg = TrainConfig { checkpoint_every: 2, ..train_cfg::<f32>(4) };
    for dir in &dirs[..2] {
        kd_trainer::<f32>(cfg.clone(), kd_losses()).fit(&d, Some(dir.path())).unwrap();
    }
    let read = |dir: &tempfile::TempDir, f: &str| std::fs::read(dir.path().join(f)).unwrap();
    assert!(read(&dirs[0], "final.akd") == read(&dirs[1], "final.akd"));
    assert_eq!(read(&dirs[0], "metrics.csv"), read(&dirs[1], "metrics.csv"));
    let metrics = String::from_utf8(read(&dirs[0], "metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "step,lr,l_sup,l_attn_tv,l_v_focus,l_v_all,l_v,l_rkld,total");
    assert_eq!(metrics.lines().count(), 5);
    assert!(dirs[0].path().join("ckpt_step2.akd").exists());

    // Resume from the step-2 checkpoint next to a metrics file that already
    // holds rows past it; those rows are replaced.
    std::fs::copy(dirs[0].path().join("metrics.csv"), dirs[2].path().join("metrics.csv")).unwrap();
    let mid = Checkpoint::open(&dirs[0].path().join("ckpt_step2.akd")).unwrap();
    let mut second = kd_trainer::<f32>(cfg.clone(), kd_losses());
    second.resume(&mid).unwrap();
    assert_eq!(second.step, 2);
    assert_eq!(second.fit(&d, Some(dirs[2].path())).unwrap().reports.len(), 2);
    assert!(read(&dirs[0], "final.akd") == read(&dirs[2], "final.akd"));
    assert_eq!(read(&dirs[0], "metrics.csv"), read(&dirs[2], "metrics.csv"));

    // Resuming from the final checkpoint is a no-op.
    let fin = Checkpoint::open(&dirs[0].path().join("final.akd")).unwrap();
    let mut third = kd_trainer::<f32>(cfg, kd_losses());
    third.resume(&fin).unwrap();
    assert!(third.fit(&d, Some(dirs[1].path())).unwrap().reports.is_empty());
    assert!(read(&dirs[0], "final.akd") == read(&dirs[1], "final.akd"));
}

#[test]
fn zero_steps_writes_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = kd_trainer::<f32>(train_cfg::<f32>(0), kd_losses());
    let out = t.fit(&data(2, 8), Some(dir.path())).unwrap();
    assert!(out.reports.is_empty());
    let ck = Checkpoint::open(&out.final_checkpoint.unwrap()).unwrap();
    assert_eq!(ck.get("step"), Some("0"));
    let restored = Vlm::<f32>::from_checkpoint(&ck).unwrap();
    assert_eq!(max_abs_diff(&restored, &Vlm::new(&student_cfg()).unwrap()), 0.0);
}

#[test]
fn non_finite_loss_aborts_step() {
    let mut t = kd_trainer::<f32>(train_cfg::<f32>(2), kd_losses());
    t.model.final_bias.data_mut()[0] = f32::NAN;
    let err = t.run_step(&data(4, 9)).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss(_)), "{err:?}");
    assert_eq!(t.step, 0);
    assert!(t.model.trainable().iter().all(|p| p.tensor.grad().is_none()));
}

#[test]
fn teacher_disk_cache_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(3, 10);
    let refs: Vec<&Sample> = d.iter().collect();
    let mut a = Teacher::<f32>::new(Vlm::new(&teacher_cfg()).unwrap(), Some(dir.path().to_path_buf())).unwrap();
    let first = a.signals(&refs, true).unwrap();
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 3);
    let mut b = Teacher::<f32>::new(Vlm::new(&teacher_cfg()).unwrap(), Some(dir.path().to_path_buf())).unwrap();
    let second = b.signals(&refs, true).unwrap();
    assert_eq!(b.forwards, 0);
    for (x, y) in first.iter().zip(&second) {
        assert!(x.attn_first.bit_eq(&y.attn_first));
        assert!(x.attn_last.as_ref().unwrap().bit_eq(y.attn_last.as_ref().unwrap()));
        assert!(x.vision.bit_eq(&y.vision));
        assert!(x.logits.bit_eq(&y.logits));
    }
    assert_ne!(sample_key(&d[0]), sample_key(&d[1]));
}

#[test]
fn evaluate_uniform_and_recomputed() {
    let cfg = VlmConfig { vocab_size: 256, ..student_cfg() };
    let model = Vlm::<f64>::new(&cfg).unwrap();
    let d = data(6, 11);
    let r = evaluate(&model, &d).unwrap();
    // Recompute from a logits dump.
    let mut nll = 0.0;
    let mut n = 0;
    for s in &d {
        let f = s.teacher_forced();
        let trace = model.forward_batch(&[s.image.clone()], &[f.input.clone()], false).unwrap();
        let logits = trace.logits.to_vec();
        for (i, (&t, &m)) in f.targets.iter().zip(&f.mask).enumerate() {
            if m {
                let row = &logits[(cfg.n_vision_tokens + i) * 256..(cfg.n_vision_tokens + i + 1) * 256];
                let z: f64 = row.iter().map(|x| x.exp()).sum();
                nll -= (row[t as usize].exp() / z).ln();
                n += 1;
            }
        }
    }
    assert_eq!(r.n_tokens, n);
    assert!((r.cross_entropy - nll / n as f64).abs() <= 1e-8);

    model.final_gain.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let u = evaluate(&model, &d).unwrap();
    assert!((u.cross_entropy - 256f64.ln()).abs() < 1e-12);
    assert!(matches!(evaluate(&model, &[]), Err(Error::EmptyDataset)));
}

#[test]
fn memorises_single_sample() {
    let d = data(1, 12);
    let cfg = TrainConfig { steps: 150, batch_size: 1, lr_projector_max: 1e-2, lr_other_max: 1e-2, warmup_frac: 0.0, ..train_cfg::<f32>(150) };
    let mut t = Trainer::<f32>::new(Vlm::new(&student_cfg()).unwrap(), None, cfg, LossConfig::sup_only()).unwrap();
    t.fit(&d, None).unwrap();
    let r = evaluate(&t.model, &d).unwrap();
    assert_eq!(r.exact_match, 1.0, "ce {}", r.cross_entropy);
}
