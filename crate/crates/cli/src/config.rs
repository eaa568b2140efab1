//! Run configuration shared by every subcommand.
//!
//! A TOML file with a `schema = 1` line. Missing keys fall back to defaults
//! derived from the root `seed`; unknown keys are rejected. Environment
//! variables `AKD_<SECTION>__<KEY>=<value>` override file values, e.g.
//! `AKD_TRAIN__STEPS=50` or `AKD_MODEL__STUDENT__D_MODEL=32`.

use std::path::{Path, PathBuf};

use alignkd::data::synth::{SynthSpec, D_PATCH, PATCH_GRID};
use alignkd::data::vocab::MIN_VOCAB;
use alignkd::losses::LossConfig;
use alignkd::train::TrainConfig;
use alignkd::vlm::VlmConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: i64 = 1;
pub const ENV_PREFIX: &str = "AKD_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub teacher: VlmConfig,
    pub student: VlmConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_path: PathBuf,
    pub eval_path: PathBuf,
    /// Held-out samples written next to the training set by `synth`; 0 skips it.
    pub n_eval: usize,
    pub synth: SynthSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub max_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: i64,
    /// Root seed. Model, trainer and data seeds derive from it unless set.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub losses: LossConfig,
    pub data: DataConfig,
    pub probe: ProbeConfig,
}

/// splitmix64 finaliser over `root + salt * golden`, kept below 2^63 so it
/// round-trips through a TOML integer.
pub fn derive_seed(root: u64, salt: u64) -> u64 {
    let mut z = root.wrapping_add(salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    (z ^ (z >> 31)) >> 1
}

impl RunConfig {
    pub fn defaults(seed: u64) -> Self {
        RunConfig {
            schema: SCHEMA_VERSION,
            seed,
            output_dir: PathBuf::from("runs"),
            model: ModelSection {
                teacher: VlmConfig { seed: derive_seed(seed, 1), ..VlmConfig::teacher() },
                student: VlmConfig { seed: derive_seed(seed, 2), ..VlmConfig::student() },
            },
            train: TrainConfig { seed: derive_seed(seed, 3), ..TrainConfig::default() },
            losses: LossConfig::default(),
            data: DataConfig {
                train_path: PathBuf::from("data/train.jsonl"),
                eval_path: PathBuf::from("data/eval.jsonl"),
                n_eval: 200,
                synth: SynthSpec { n_samples: 2000, seed, ..SynthSpec::default() },
            },
            probe: ProbeConfig { max_samples: 64 },
        }
    }

    /// Read `path` (or start from defaults when `None`), apply `env`
    /// overrides and validate.
    pub fn load<I>(path: Option<&Path>, env: I) -> CliResult<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut raw = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
                let table: Table =
                    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                match table.get("schema") {
                    Some(Value::Integer(SCHEMA_VERSION)) => {}
                    Some(other) => return Err(CliError::Config(format!("unsupported schema {other}, expected 1"))),
                    None => return Err(CliError::Config(format!("{}: missing `schema = 1` line", p.display()))),
                }
                table
            }
            None => Table::new(),
        };
        apply_env(&mut raw, env)?;
        Self::from_table(raw)
    }

    pub fn from_table(raw: Table) -> CliResult<Self> {
        let seed = match raw.get("seed") {
            None => 0,
            Some(Value::Integer(s)) if *s >= 0 => *s as u64,
            Some(other) => return Err(CliError::Config(format!("seed must be a nonnegative integer, got {other}"))),
        };
        let mut merged = Table::try_from(Self::defaults(seed)).expect("defaults serialise");
        merge(&mut merged, raw);
        let cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(CliError::Config(format!("unsupported schema {}, expected 1", self.schema)));
        }
        for (role, m) in [("teacher", &self.model.teacher), ("student", &self.model.student)] {
            m.validate().map_err(|e| CliError::Config(format!("model.{role}: {e}")))?;
            if m.patch_grid != PATCH_GRID || m.d_patch != D_PATCH || m.vocab_size < MIN_VOCAB {
                return Err(CliError::Config(format!(
                    "model.{role}: synthetic data needs patch_grid {PATCH_GRID:?}, d_patch {D_PATCH} and vocab_size >= {MIN_VOCAB}"
                )));
            }
        }
        self.model
            .teacher
            .check_compatible(&self.model.student)
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Config(format!("train: {e}")))?;
        self.losses
            .validate(self.model.student.n_vision_tokens)
            .map_err(|e| CliError::Config(format!("losses: {e}")))?;
        if self.probe.max_samples == 0 {
            return Err(CliError::Config("probe.max_samples must be at least 1".into()));
        }
        Ok(())
    }
}

/// Recursive merge: tables merge key by key, anything else replaces.
fn merge(base: &mut Table, patch: Table) {
    for (k, v) in patch {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(p)) => merge(b, p),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn apply_env<I>(raw: &mut Table, env: I) -> CliResult<()>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut vars: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (key, value) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..].split("__").map(str::to_lowercase).collect();
        if path.iter().any(String::is_empty) {
            return Err(CliError::Config(format!("malformed override variable {key}")));
        }
        // Values are TOML literals; anything that does not parse is a string.
        let parsed = toml::from_str::<Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or(Value::String(value));
        let (last, parents) = path.split_last().expect("nonempty");
        let mut table = &mut *raw;
        for p in parents {
            let entry = table.entry(p.clone()).or_insert_with(|| Value::Table(Table::new()));
            table = match entry {
                Value::Table(t) => t,
                _ => return Err(CliError::Config(format!("{key}: `{p}` is not a section"))),
            };
        }
        table.insert(last.clone(), parsed);
    }
    Ok(())
}
