use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vlm::VlmConfig;

/// Per-position linear mix over the head channel: teacher heads to student heads.
#[derive(Debug, Clone)]
pub struct HeadProjector<S: Scalar> {
    /// `[H_student, H_teacher]`
    pub weight: Tensor<S>,
    /// `[H_student]`
    pub bias: Tensor<S>,
}

impl<S: Scalar> HeadProjector<S> {
    pub fn new(h_student: usize, h_teacher: usize, rng: &mut ChaCha8Rng) -> Self {
        HeadProjector {
            weight: Tensor::randn(&[h_student, h_teacher], 1.0 / (h_teacher as f64).sqrt(), rng).to_param(),
            bias: Tensor::zeros(&[h_student]).to_param(),
        }
    }

    pub fn identity(h: usize) -> Self {
        let mut w = vec![S::zero(); h * h];
        (0..h).for_each(|i| w[i * h + i] = S::one());
        HeadProjector {
            weight: Tensor::param(w, &[h, h]).expect("square"),
            bias: Tensor::zeros(&[h]).to_param(),
        }
    }

    /// `[H_T, R, C]` to `[H_S, R, C]`.
    pub fn apply(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let (hs, ht) = (self.weight.shape()[0], self.weight.shape()[1]);
        if x.rank() != 3 || x.shape()[0] != ht {
            return Err(Error::shape(format!("head projector expects [{ht}, R, C], got {:?}", x.shape())));
        }
        let (r, cols) = (x.shape()[1], x.shape()[2]);
        let flat = x.reshape(&[ht, r * cols])?;
        let mixed = self.weight.matmul(&flat)?.add(&self.bias.reshape(&[hs, 1])?)?;
        mixed.reshape(&[hs, r, cols])
    }
}

/// Linear map from teacher width to student width applied to every token row.
#[derive(Debug, Clone)]
pub struct EmbedProjector<S: Scalar> {
    /// `[d_student, d_teacher]`
    pub weight: Tensor<S>,
    /// `[d_student]`
    pub bias: Tensor<S>,
}

impl<S: Scalar> EmbedProjector<S> {
    pub fn new(d_student: usize, d_teacher: usize, rng: &mut ChaCha8Rng) -> Self {
        EmbedProjector {
            weight: Tensor::randn(&[d_student, d_teacher], 1.0 / (d_teacher as f64).sqrt(), rng).to_param(),
            bias: Tensor::zeros(&[d_student]).to_param(),
        }
    }

    pub fn identity(d: usize) -> Self {
        let mut w = vec![S::zero(); d * d];
        (0..d).for_each(|i| w[i * d + i] = S::one());
        EmbedProjector {
            weight: Tensor::param(w, &[d, d]).expect("square"),
            bias: Tensor::zeros(&[d]).to_param(),
        }
    }

    /// `[N, d_T]` to `[N, d_S]`.
    pub fn apply(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.matmul_t(&self.weight)?.add(&self.bias)
    }
}

/// Trainable projectors owned by the distillation objective.
#[derive(Debug, Clone)]
pub struct KdProjectors<S: Scalar> {
    pub attn: HeadProjector<S>,
    /// Separate head mix for the last-layer attention term.
    pub attn_last: HeadProjector<S>,
    pub embed: EmbedProjector<S>,
}

impl<S: Scalar> KdProjectors<S> {
    pub fn new(student: &VlmConfig, teacher: &VlmConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        KdProjectors {
            attn: HeadProjector::new(student.n_heads, teacher.n_heads, &mut rng),
            attn_last: HeadProjector::new(student.n_heads, teacher.n_heads, &mut rng),
            embed: EmbedProjector::new(student.d_model, teacher.d_model, &mut rng),
        }
    }

    /// Identity maps, for a teacher with the same head count and width as the student.
    pub fn identity(cfg: &VlmConfig) -> Self {
        KdProjectors {
            attn: HeadProjector::identity(cfg.n_heads),
            attn_last: HeadProjector::identity(cfg.n_heads),
            embed: EmbedProjector::identity(cfg.d_model),
        }
    }

    pub fn named(&self) -> Vec<(String, Tensor<S>)> {
        vec![
            ("kd.attn.weight".into(), self.attn.weight.clone()),
            ("kd.attn.bias".into(), self.attn.bias.clone()),
            ("kd.attn_last.weight".into(), self.attn_last.weight.clone()),
            ("kd.attn_last.bias".into(), self.attn_last.bias.clone()),
            ("kd.embed.weight".into(), self.embed.weight.clone()),
            ("kd.embed.bias".into(), self.embed.bias.clone()),
        ]
    }

    pub fn zero_grad(&self) {
        self.named().iter().for_each(|(_, t)| t.zero_grad());
    }

    pub fn save_into(&self, ck: &mut Checkpoint) {
        for (name, t) in self.named() {
            ck.push(name, &t);
        }
    }

    pub fn load_from(&self, ck: &Checkpoint) -> Result<()> {
        for (name, t) in self.named() {
            let stored = ck.load_shaped::<S>(&name, t.shape())?;
            t.data_mut().copy_from_slice(&stored.data());
        }
        Ok(())
    }
}
