use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which part of the attention matrix the attention term distils.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnBlock {
    /// text queries over vision keys
    Tv,
    Vv,
    Tt,
    /// the whole first-layer matrix
    All,
    /// the whole first-layer matrix plus the whole last-layer matrix
    AllPlusLast,
}

impl AttnBlock {
    pub const ALL: [AttnBlock; 5] = [AttnBlock::Tv, AttnBlock::Vv, AttnBlock::Tt, AttnBlock::All, AttnBlock::AllPlusLast];
}

impl fmt::Display for AttnBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttnBlock::Tv => "tv",
            AttnBlock::Vv => "vv",
            AttnBlock::Tt => "tt",
            AttnBlock::All => "all",
            AttnBlock::AllPlusLast => "all_plus_last",
        })
    }
}

impl FromStr for AttnBlock {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AttnBlock::ALL
            .into_iter()
            .find(|b| b.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown attn_block `{s}`")))
    }
}

/// How focus scores combine the teacher's heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FocusReduction {
    Mean,
    Sum,
}

/// Term toggles and weights of the distillation objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub enable_rkld: bool,
    pub enable_attn_tv: bool,
    pub enable_v_all: bool,
    pub enable_v_focus: bool,
    pub attn_block: AttnBlock,
    pub lambda: f64,
    pub k: usize,
    pub focus_reduction: FocusReduction,
    /// Lower clamp on teacher probabilities inside the log; `0` disables it.
    pub rkld_floor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            enable_rkld: true,
            enable_attn_tv: true,
            enable_v_all: true,
            enable_v_focus: true,
            attn_block: AttnBlock::Tv,
            lambda: 0.1,
            k: 16,
            focus_reduction: FocusReduction::Mean,
            rkld_floor: 1e-8,
        }
    }
}

impl LossConfig {
    /// Supervised loss only.
    pub fn sup_only() -> Self {
        LossConfig { enable_rkld: false, enable_attn_tv: false, enable_v_all: false, enable_v_focus: false, ..Self::default() }
    }

    pub fn any_kd(&self) -> bool {
        self.enable_rkld || self.enable_attn_tv || self.enable_v_all || self.enable_v_focus
    }

    pub fn needs_last_attention(&self) -> bool {
        self.enable_attn_tv && self.attn_block == AttnBlock::AllPlusLast
    }

    pub fn validate(&self, n_vision_tokens: usize) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::NegativeLambda(self.lambda));
        }
        if self.k == 0 || self.k > n_vision_tokens {
            return Err(Error::BadK { k: self.k, n: n_vision_tokens });
        }
        if !(self.rkld_floor >= 0.0 && self.rkld_floor < 1.0) {
            return Err(Error::Config(format!("rkld_floor must be in [0, 1), got {}", self.rkld_floor)));
        }
        Ok(())
    }
}
