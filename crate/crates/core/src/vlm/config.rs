use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scale knobs of one toy vision-language model.
///
/// Teacher and student share `vocab_size`, `patch_grid`, `d_patch`,
/// `n_vision_tokens` and `frozen_seed` so their token positions line up.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VlmConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub vocab_size: usize,
    /// Patch grid as `[rows, cols]`.
    pub patch_grid: (usize, usize),
    pub d_patch: usize,
    pub n_vision_tokens: usize,
    pub max_text_tokens: usize,
    /// Feed-forward hidden width as a multiple of `d_model`.
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
    /// Seed for trainable parameter initialisation.
    pub seed: u64,
    /// Seed for the frozen patch embedder and token table.
    #[serde(default = "default_frozen_seed")]
    pub frozen_seed: u64,
}

fn default_ffn_mult() -> usize {
    2
}

fn default_frozen_seed() -> u64 {
    0x5eed
}

impl VlmConfig {
    pub fn student() -> Self {
        VlmConfig {
            d_model: 64,
            n_heads: 4,
            n_layers: 4,
            vocab_size: 256,
            patch_grid: (8, 8),
            d_patch: 16,
            n_vision_tokens: 16,
            max_text_tokens: 24,
            ffn_mult: default_ffn_mult(),
            seed: 1,
            frozen_seed: default_frozen_seed(),
        }
    }

    pub fn teacher() -> Self {
        VlmConfig { d_model: 128, n_heads: 8, n_layers: 8, seed: 2, ..Self::student() }
    }

    pub fn n_patches(&self) -> usize {
        self.patch_grid.0 * self.patch_grid.1
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.d_model * self.ffn_mult
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads));
        }
        if self.n_vision_tokens == 0 || self.n_patches() % self.n_vision_tokens != 0 {
            return fail(format!(
                "n_vision_tokens {} must divide the {} patches",
                self.n_vision_tokens,
                self.n_patches()
            ));
        }
        if self.n_layers < 2 {
            return fail(format!("n_layers must be at least 2, got {}", self.n_layers));
        }
        if self.vocab_size < 4 || self.d_patch == 0 || self.max_text_tokens == 0 || self.ffn_mult == 0 {
            return fail("vocab_size >= 4 and positive d_patch, max_text_tokens, ffn_mult required".into());
        }
        Ok(())
    }

    /// Token interface shared between a teacher and a student.
    pub fn check_compatible(&self, other: &VlmConfig) -> Result<()> {
        if self.vocab_size != other.vocab_size
            || self.patch_grid != other.patch_grid
            || self.d_patch != other.d_patch
            || self.n_vision_tokens != other.n_vision_tokens
        {
            return Err(Error::Config(
                "teacher and student must share vocab_size, patch_grid, d_patch and n_vision_tokens".into(),
            ));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("d_model".into(), self.d_model.to_string()),
            ("n_heads".into(), self.n_heads.to_string()),
            ("n_layers".into(), self.n_layers.to_string()),
            ("vocab_size".into(), self.vocab_size.to_string()),
            ("patch_rows".into(), self.patch_grid.0.to_string()),
            ("patch_cols".into(), self.patch_grid.1.to_string()),
            ("d_patch".into(), self.d_patch.to_string()),
            ("n_vision_tokens".into(), self.n_vision_tokens.to_string()),
            ("max_text_tokens".into(), self.max_text_tokens.to_string()),
            ("ffn_mult".into(), self.ffn_mult.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("frozen_seed".into(), self.frozen_seed.to_string()),
        ]
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T> {
            let raw = kv.get(key).ok_or_else(|| Error::Checkpoint(format!("missing config key `{key}`")))?;
            raw.parse().map_err(|_| Error::Checkpoint(format!("bad value `{raw}` for `{key}`")))
        }
        let cfg = VlmConfig {
            d_model: get(kv, "d_model")?,
            n_heads: get(kv, "n_heads")?,
            n_layers: get(kv, "n_layers")?,
            vocab_size: get(kv, "vocab_size")?,
            patch_grid: (get(kv, "patch_rows")?, get(kv, "patch_cols")?),
            d_patch: get(kv, "d_patch")?,
            n_vision_tokens: get(kv, "n_vision_tokens")?,
            max_text_tokens: get(kv, "max_text_tokens")?,
            ffn_mult: get(kv, "ffn_mult")?,
            seed: get(kv, "seed")?,
            frozen_seed: get(kv, "frozen_seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
