use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::data::{shuffled_order, DistillBatch, Sample};
use crate::error::{Error, Result};
use crate::losses::{sample_losses, KdProjectors, LossConfig, LossReport, StudentSignals};
use crate::scalar::{c, Precision, Scalar};
use crate::tensor::Tensor;
use crate::vlm::{ParamGroup, Vlm};

use super::optim::{AdamW, LrGroup};
use super::teacher::Teacher;
use super::{cosine_lr, TrainConfig};

/// Seed offset for the distillation projector initialisation.
const PROJ_SEED_SALT: u64 = 0x6b64_7072_6f6a;

pub struct TrainOutcome {
    /// One report per optimizer step run in this call.
    pub reports: Vec<LossReport>,
    pub final_checkpoint: Option<PathBuf>,
}

/// Owns the trainee, the optional frozen teacher, the distillation projectors
/// and the optimizer state.
pub struct Trainer<S: Scalar> {
    pub model: Vlm<S>,
    pub teacher: Option<Teacher<S>>,
    pub proj: Option<KdProjectors<S>>,
    pub train: TrainConfig,
    pub losses: LossConfig,
    pub opt: AdamW<S>,
    /// Optimizer updates applied so far.
    pub step: usize,
    /// Header tag naming what is being trained.
    pub role: String,
    /// Extra header entries written into every checkpoint.
    pub header: Vec<(String, String)>,
    micro: usize,
    pending: LossReport,
    epoch_order: Option<(usize, Vec<usize>)>,
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

impl<S: Scalar> Trainer<S> {
    pub fn new(model: Vlm<S>, teacher: Option<Teacher<S>>, train: TrainConfig, losses: LossConfig) -> Result<Self> {
        train.validate()?;
        losses.validate(model.cfg.n_vision_tokens)?;
        if train.precision != Precision::of::<S>() {
            return Err(Error::Config(format!(
                "config asks for {} but the trainer runs in {}",
                train.precision,
                S::NAME
            )));
        }
        if losses.any_kd() && teacher.is_none() {
            return Err(Error::Config("distillation terms are enabled but no teacher was given".into()));
        }
        let proj = match &teacher {
            Some(t) => {
                t.model.cfg.check_compatible(&model.cfg)?;
                Some(KdProjectors::new(&model.cfg, &t.model.cfg, train.seed ^ PROJ_SEED_SALT))
            }
            None => None,
        };
        let mut params: Vec<(String, Tensor<S>, LrGroup)> = model
            .trainable()
            .into_iter()
            .map(|p| {
                let g = if p.group == ParamGroup::Projector { LrGroup::Projector } else { LrGroup::Other };
                (p.name, p.tensor, g)
            })
            .collect();
        if let Some(p) = &proj {
            params.extend(p.named().into_iter().map(|(n, t)| (n, t, LrGroup::Projector)));
        }
        let opt = AdamW::new(params, train.weight_decay);
        Ok(Trainer {
            model,
            teacher,
            proj,
            train,
            losses,
            opt,
            step: 0,
            role: "student".into(),
            header: Vec::new(),
            micro: 0,
            pending: LossReport::default(),
            epoch_order: None,
        })
    }

    pub fn with_role(mut self, role: &str) -> Self {
        self.role = role.to_string();
        self
    }

    pub fn into_teacher(self) -> Option<Teacher<S>> {
        self.teacher
    }

    /// Rates for update number `t` (1-based): `(projector, other)`.
    pub fn lr_at(&self, t: usize) -> Result<(f64, f64)> {
        let (total, warm) = (self.train.steps, self.train.warmup_steps());
        Ok((
            cosine_lr(t, self.train.lr_projector_max, total, warm)?,
            cosine_lr(t, self.train.lr_other_for_stage(), total, warm)?,
        ))
    }

    /// Forward, loss and backward for one micro-batch. Gradients accumulate;
    /// the optimizer runs once `accumulation_steps` micro-batches have been
    /// seen. Every sample's loss is weighted by `1 / (len · accumulation_steps)`.
    pub fn train_step(&mut self, batch: &DistillBatch) -> Result<LossReport> {
        let samples = batch.samples();
        let refs: Vec<&Sample> = samples.iter().collect();
        let report = self.micro_step(&refs)?;
        if self.micro == 0 {
            self.apply_update()?;
        }
        Ok(report)
    }

    fn micro_step(&mut self, samples: &[&Sample]) -> Result<LossReport> {
        let res = self.micro_step_inner(samples);
        if res.is_err() {
            self.opt.zero_grad();
            self.micro = 0;
            self.pending = LossReport::default();
        }
        res
    }

    fn micro_step_inner(&mut self, samples: &[&Sample]) -> Result<LossReport> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let with_last = self.losses.needs_last_attention();
        let forced: Vec<_> = samples.iter().map(|s| s.teacher_forced()).collect();
        let teacher_sigs = match (&mut self.teacher, self.losses.any_kd()) {
            (Some(t), true) => Some(t.signals(samples, with_last)?),
            _ => None,
        };
        let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
        let inputs: Vec<_> = forced.iter().map(|f| f.input.clone()).collect();
        let trace = self.model.forward_batch(&images, &inputs, with_last)?;
        let weight = 1.0 / (samples.len() * self.train.accumulation_steps) as f64;
        let fallback;
        let proj = match &self.proj {
            Some(p) => p,
            None => {
                fallback = KdProjectors::identity(&self.model.cfg);
                &fallback
            }
        };
        let mut report = LossReport::default();
        let mut total: Option<Tensor<S>> = None;
        for (b, f) in forced.iter().enumerate() {
            let student = StudentSignals {
                attn_first: trace.sample_attn_first(b)?,
                attn_last: trace.sample_attn_last(b)?,
                vision: trace.sample_vision(b)?,
                logits: trace.sample_logits(b)?,
                n_vision: trace.n_vision,
            };
            let (targets, mask) = f.sequence_targets(trace.n_vision);
            let terms = sample_losses(&student, teacher_sigs.as_ref().map(|t| &t[b]), &targets, &mask, proj, &self.losses)
                .map_err(|e| match e {
                    Error::NonFiniteComponent(name) => Error::NonFiniteLoss(name),
                    other => other,
                })?;
            let r = terms.report();
            if let Some((name, _)) = r.components().into_iter().find(|(_, v)| !v.is_finite()) {
                return Err(Error::NonFiniteLoss(name));
            }
            report.add_weighted(&r, 1.0 / samples.len() as f64);
            let scaled = terms.total.scale(c(weight));
            total = Some(match total {
                None => scaled,
                Some(t) => t.add(&scaled)?,
            });
        }
        total.expect("nonempty batch").backward()?;
        self.pending.add_weighted(&report, 1.0 / self.train.accumulation_steps as f64);
        self.micro = (self.micro + 1) % self.train.accumulation_steps;
        Ok(report)
    }

    fn apply_update(&mut self) -> Result<()> {
        let (lp, lo) = self.lr_at(self.step + 1)?;
        self.opt.step(|g| match g {
            LrGroup::Projector => lp,
            LrGroup::Other => lo,
        });
        self.opt.zero_grad();
        self.step += 1;
        Ok(())
    }

    fn sample_at<'a>(&mut self, data: &'a [Sample], pos: usize) -> &'a Sample {
        let n = data.len();
        let epoch = pos / n;
        if self.epoch_order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            self.epoch_order = Some((epoch, shuffled_order(n, epoch_seed(self.train.seed, epoch))));
        }
        let order = &self.epoch_order.as_ref().expect("just set").1;
        &data[order[pos % n]]
    }

    /// One optimizer step on the next `effective_batch` samples of the data
    /// stream (consecutive shuffled epochs). Returns the step's mean report.
    pub fn run_step(&mut self, data: &[Sample]) -> Result<LossReport> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (bs, eff) = (self.train.batch_size, self.train.effective_batch());
        let start = self.step * eff;
        self.pending = LossReport::default();
        self.micro = 0;
        for m in 0..self.train.accumulation_steps {
            let picked: Vec<&Sample> = (0..bs).map(|i| self.sample_at(data, start + m * bs + i)).collect();
            self.micro_step(&picked)?;
        }
        let report = std::mem::take(&mut self.pending);
        self.apply_update()?;
        Ok(report)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint(self.train.precision);
        ck.set("role", &self.role);
        ck.set("step", self.step);
        ck.set("train_seed", self.train.seed);
        ck.set("stage", self.train.stage);
        for (k, v) in &self.header {
            ck.set(k, v);
        }
        if let Some(p) = &self.proj {
            p.save_into(&mut ck);
        }
        self.opt.save_into(&mut ck);
        ck
    }

    /// Restore model, projectors, optimizer moments and step from a checkpoint
    /// written by the same configuration.
    pub fn resume(&mut self, ck: &Checkpoint) -> Result<()> {
        let restored = Vlm::<S>::from_checkpoint(ck)?;
        if restored.cfg != self.model.cfg {
            return Err(Error::Config("checkpoint model configuration differs from the run configuration".into()));
        }
        let precision: Precision = ck.require::<String>("precision")?.parse().map_err(Error::Checkpoint)?;
        if precision != self.train.precision {
            return Err(Error::Config(format!("checkpoint precision {precision} differs from {}", self.train.precision)));
        }
        for (dst, src) in self.model.named_tensors().iter().zip(restored.named_tensors()) {
            dst.tensor.data_mut().copy_from_slice(&src.tensor.data());
        }
        if let Some(p) = &self.proj {
            p.load_from(ck)?;
        }
        self.opt.load_from(ck)?;
        self.step = ck.require("step")?;
        if self.step > self.train.steps {
            return Err(Error::Config(format!("checkpoint is at step {} beyond configured {}", self.step, self.train.steps)));
        }
        Ok(())
    }

    /// Train up to `train.steps`, writing `metrics.csv`, periodic
    /// `ckpt_step{N}.akd` and `final.akd` into `out_dir` when given.
    pub fn fit(&mut self, data: &[Sample], out_dir: Option<&Path>) -> Result<TrainOutcome> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut metrics = match out_dir {
            Some(dir) => Some(open_metrics(dir, self.step)?),
            None => None,
        };
        let mut reports = Vec::new();
        while self.step < self.train.steps {
            let (_, lr_other) = self.lr_at(self.step + 1)?;
            let report = self.run_step(data)?;
            log::debug!("step {} total {:.5}", self.step, report.total);
            if let (Some((path, w)), Some(_)) = (metrics.as_mut(), out_dir) {
                writeln!(w, "{}", report.csv_row(self.step, lr_other)).map_err(|e| Error::io(path.as_path(), e))?;
            }
            reports.push(report);
            if let Some(dir) = out_dir {
                if self.train.checkpoint_every > 0 && self.step % self.train.checkpoint_every == 0 {
                    self.checkpoint().save(&dir.join(format!("ckpt_step{}.akd", self.step)))?;
                }
            }
        }
        if let Some((path, w)) = metrics.as_mut() {
            w.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        let final_checkpoint = match out_dir {
            Some(dir) => {
                let path = dir.join("final.akd");
                self.checkpoint().save(&path)?;
                Some(path)
            }
            None => None,
        };
        Ok(TrainOutcome { reports, final_checkpoint })
    }
}

/// Fresh metrics file, or on resume the existing one cut back to `keep_until`.
fn open_metrics(dir: &Path, keep_until: usize) -> Result<(PathBuf, std::io::BufWriter<fs::File>)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("metrics.csv");
    let mut kept = String::from(LossReport::CSV_HEADER);
    kept.push('\n');
    if keep_until > 0 {
        if let Ok(existing) = fs::read_to_string(&path) {
            for line in existing.lines().skip(1) {
                let step: Option<usize> = line.split(',').next().and_then(|s| s.parse().ok());
                if step.is_some_and(|s| s <= keep_until) {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
        }
    }
    fs::write(&path, &kept).map_err(|e| Error::io(&path, e))?;
    let f = fs::OpenOptions::new().append(true).open(&path).map_err(|e| Error::io(&path, e))?;
    Ok((path, std::io::BufWriter::new(f)))
}
