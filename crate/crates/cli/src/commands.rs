//! Subcommand bodies. Each writes its report to `out` and returns a
//! [`CliError`] whose exit code classifies the failure.

use std::io::Write;
use std::path::{Path, PathBuf};

use alignkd::checkpoint::Checkpoint;
use alignkd::data::synth::{self_check, synth_samples, SynthSpec};
use alignkd::data::{read_dataset, write_dataset, Sample};
use alignkd::gradsuite::{run_suite, SuiteOptions};
use alignkd::losses::LossConfig;
use alignkd::probe::probe_aggregate;
use alignkd::train::{evaluate, Stage, Teacher, Trainer};
use alignkd::vlm::{Vlm, VlmConfig};
use alignkd::{Precision, Scalar};

use crate::config::{derive_seed, RunConfig};
use crate::error::{CliError, CliResult};

/// Salt separating the held-out set's seed from the training set's.
const EVAL_SEED_SALT: u64 = 0xe7a1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Role {
    Teacher,
    Student,
}

impl Role {
    fn name(self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub role: Role,
    pub stage: Option<Stage>,
    pub teacher: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub cache_teacher: bool,
    pub out_dir: Option<PathBuf>,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Run(alignkd::Error::Io { path: path.to_path_buf(), source: e })
}

fn emit(out: &mut dyn Write, line: impl std::fmt::Display) -> CliResult<()> {
    writeln!(out, "{line}").map_err(|e| io_err(Path::new("<stdout>"), e))
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} {} does not exist", path.display())))
    }
}

fn create_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e)),
        _ => Ok(()),
    }
}

fn generate(spec: &SynthSpec, path: &Path) -> CliResult<usize> {
    spec.validate()?;
    let samples = synth_samples(spec)?;
    let failures = self_check(&samples)?;
    if failures > 0 {
        return Err(CliError::Run(alignkd::Error::DomainError(format!(
            "{failures} generated samples fail the generator self-check"
        ))));
    }
    create_parent(path)?;
    write_dataset(path, &samples, Some(spec.seed))?;
    Ok(samples.len())
}

pub fn cmd_synth(cfg: &RunConfig, out: &mut dyn Write) -> CliResult<()> {
    let n = generate(&cfg.data.synth, &cfg.data.train_path)?;
    emit(out, format!("train_samples={n}"))?;
    emit(out, format!("train_path={}", cfg.data.train_path.display()))?;
    if cfg.data.n_eval > 0 {
        let spec = SynthSpec {
            n_samples: cfg.data.n_eval,
            seed: cfg.data.synth.seed ^ EVAL_SEED_SALT,
            ..cfg.data.synth.clone()
        };
        let n = generate(&spec, &cfg.data.eval_path)?;
        emit(out, format!("eval_samples={n}"))?;
        emit(out, format!("eval_path={}", cfg.data.eval_path.display()))?;
    }
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, args: &TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut train = cfg.train.clone();
    if let Some(stage) = args.stage {
        train.stage = stage;
    }
    let (model_cfg, losses) = match args.role {
        Role::Teacher => {
            if cfg.losses.any_kd() {
                log::info!("teacher pretraining uses the supervised term only");
            }
            (cfg.model.teacher.clone(), LossConfig::sup_only())
        }
        Role::Student => (cfg.model.student.clone(), cfg.losses.clone()),
    };
    let teacher_path = match (&args.teacher, args.role, losses.any_kd()) {
        (_, Role::Teacher, _) => None,
        (Some(p), _, true) => Some(p.clone()),
        (None, _, true) => {
            return Err(CliError::Config(
                "distillation terms are enabled but no teacher checkpoint was given (use --teacher <ckpt>)".into(),
            ))
        }
        (Some(_), _, false) => {
            log::info!("no distillation term is enabled; ignoring --teacher");
            None
        }
        (None, _, false) => None,
    };
    require_file(&cfg.data.train_path, "training data")?;
    if let Some(p) = &teacher_path {
        require_file(p, "teacher checkpoint")?;
    }
    if let Some(p) = &args.resume {
        require_file(p, "resume checkpoint")?;
    }
    let out_dir = args.out_dir.clone().unwrap_or_else(|| cfg.output_dir.join(args.role.name()));
    let job = TrainJob { cfg, model_cfg, train, losses, teacher_path, args, out_dir: &out_dir };
    match job.train.precision {
        Precision::F32 => job.run::<f32>(out),
        Precision::F64 => job.run::<f64>(out),
    }
}

struct TrainJob<'a> {
    cfg: &'a RunConfig,
    model_cfg: VlmConfig,
    train: alignkd::train::TrainConfig,
    losses: LossConfig,
    teacher_path: Option<PathBuf>,
    args: &'a TrainArgs,
    out_dir: &'a Path,
}

impl TrainJob<'_> {
    fn run<S: Scalar>(self, out: &mut dyn Write) -> CliResult<()> {
        let data = read_dataset(&self.cfg.data.train_path, self.model_cfg.vocab_size)?;
        let teacher = match &self.teacher_path {
            Some(p) => {
                let model = Vlm::<S>::from_checkpoint(&Checkpoint::open(p)?)?;
                let cache = self.args.cache_teacher.then(|| self.out_dir.join("teacher_cache"));
                Some(Teacher::new(model, cache)?)
            }
            None => None,
        };
        let mut trainer = Trainer::new(Vlm::<S>::new(&self.model_cfg)?, teacher, self.train, self.losses)?
            .with_role(self.args.role.name());
        trainer.header.push(("root_seed".into(), self.cfg.seed.to_string()));
        if let Some(p) = &self.args.resume {
            trainer.resume(&Checkpoint::open(p)?)?;
        }
        let start = trainer.step;
        let outcome = trainer.fit(&data, Some(self.out_dir))?;
        emit(out, format!("role={}", self.args.role.name()))?;
        emit(out, format!("steps_run={}", trainer.step - start))?;
        emit(out, format!("step={}", trainer.step))?;
        if let Some(r) = outcome.reports.last() {
            emit(out, format!("last_total={:e}", r.total))?;
        }
        if let Some(p) = outcome.final_checkpoint {
            emit(out, format!("checkpoint={}", p.display()))?;
        }
        emit(out, format!("metrics={}", self.out_dir.join("metrics.csv").display()))
    }
}

fn load_eval_model(checkpoint: &Path) -> CliResult<(Vlm<f64>, Checkpoint)> {
    require_file(checkpoint, "checkpoint")?;
    let ck = Checkpoint::open(checkpoint)?;
    Ok((Vlm::<f64>::from_checkpoint(&ck)?, ck))
}

fn load_samples(path: &Path, vocab: usize) -> CliResult<Vec<Sample>> {
    require_file(path, "dataset")?;
    Ok(read_dataset(path, vocab)?)
}

/// Probe metrics CSV for `checkpoint` over the evaluation set (or `data`),
/// written to `csv_path` or to `out`.
pub fn cmd_probe(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: Option<&Path>,
    csv_path: Option<&Path>,
    out: &mut dyn Write,
) -> CliResult<()> {
    let (model, ck) = load_eval_model(checkpoint)?;
    let samples = load_samples(data.unwrap_or(&cfg.data.eval_path), model.cfg.vocab_size)?;
    let report = probe_aggregate(&model, &samples, cfg.probe.max_samples)?;
    let checksum = ck.tensor_checksum();
    let seed = ck.get("root_seed").map_or_else(|| cfg.seed.to_string(), str::to_string);
    let csv = report.to_csv(&[("model_checksum", &checksum), ("root_seed", &seed)]);
    match csv_path {
        Some(p) => {
            create_parent(p)?;
            std::fs::write(p, csv).map_err(|e| io_err(p, e))?;
            emit(out, format!("probe_csv={}", p.display()))
        }
        None => out.write_all(csv.as_bytes()).map_err(|e| io_err(Path::new("<stdout>"), e)),
    }
}

pub fn cmd_gradcheck(opts: &SuiteOptions, out: &mut dyn Write) -> CliResult<()> {
    let rows = run_suite(opts)?;
    emit(out, format!("{:<22} {:>8} {:>14}  result", "term", "checked", "max_rel_err"))?;
    for r in &rows {
        let verdict = if r.passed { "PASS" } else { "FAIL" };
        emit(out, format!("{:<22} {:>8} {:>14.3e}  {verdict}", r.name, r.n_checked, r.max_rel_error))?;
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!("gradient mismatch in {}", failed.join(", "))))
    }
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, data: Option<&Path>, out: &mut dyn Write) -> CliResult<()> {
    let (model, ck) = load_eval_model(checkpoint)?;
    let samples = load_samples(data.unwrap_or(&cfg.data.eval_path), model.cfg.vocab_size)?;
    let r = evaluate(&model, &samples)?;
    emit(out, format!("cross_entropy={}", r.cross_entropy))?;
    emit(out, format!("exact_match={}", r.exact_match))?;
    emit(out, format!("n_samples={}", r.n_samples))?;
    emit(out, format!("n_tokens={}", r.n_tokens))?;
    emit(out, format!("model_checksum={}", ck.tensor_checksum()))
}

/// Seed for the gradient suite's random projectors and samples.
pub fn gradcheck_seed(cfg: &RunConfig) -> u64 {
    derive_seed(cfg.seed, 4)
}
