use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::config::VlmConfig;

pub const PAD_ID: u32 = 0;

/// Stand-in for a frozen vision encoder output: one feature row per patch.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyImage {
    pub n_patches: usize,
    pub d_patch: usize,
    /// Row-major `[n_patches, d_patch]`.
    pub patch_features: Vec<f32>,
}

impl ToyImage {
    pub fn new(patch_features: Vec<f32>, n_patches: usize, d_patch: usize) -> Result<Self> {
        if patch_features.len() != n_patches * d_patch {
            return Err(Error::shape(format!(
                "image holds {} values, expected {n_patches}x{d_patch}",
                patch_features.len()
            )));
        }
        if patch_features.iter().any(|v| !v.is_finite()) {
            return Err(Error::DomainError("non-finite patch feature".into()));
        }
        Ok(ToyImage { n_patches, d_patch, patch_features })
    }

    pub fn zeros(cfg: &VlmConfig) -> Self {
        ToyImage {
            n_patches: cfg.n_patches(),
            d_patch: cfg.d_patch,
            patch_features: vec![0.0; cfg.n_patches() * cfg.d_patch],
        }
    }

    fn check(&self, cfg: &VlmConfig) -> Result<()> {
        if self.n_patches != cfg.n_patches() || self.d_patch != cfg.d_patch {
            return Err(Error::shape(format!(
                "image is {}x{}, model expects {}x{}",
                self.n_patches,
                self.d_patch,
                cfg.n_patches(),
                cfg.d_patch
            )));
        }
        Ok(())
    }
}

/// Fixed sinusoidal position table `[n, d]`.
pub fn sinusoid_table(n: usize, d: usize, offset: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * d);
    for p in offset..offset + n {
        for j in 0..d {
            let angle = p as f64 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
            out.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    out
}

/// Frozen linear patch embedder plus fixed patch positions.
#[derive(Debug, Clone)]
pub struct ImageEmbedder<S: Scalar> {
    /// `[d_patch, d_patch]`, applied as `x · W`.
    pub weight: Tensor<S>,
    /// `[n_patches, d_patch]`.
    pub pos: Tensor<S>,
}

impl<S: Scalar> ImageEmbedder<S> {
    pub fn embed(&self, img: &ToyImage, cfg: &VlmConfig) -> Result<Tensor<S>> {
        self.embed_batch(std::slice::from_ref(img), cfg)?.reshape(&[cfg.n_patches(), cfg.d_patch])
    }

    /// `[B, n_patches, d_patch]`; never tracks gradients.
    pub fn embed_batch(&self, images: &[ToyImage], cfg: &VlmConfig) -> Result<Tensor<S>> {
        if images.is_empty() {
            return Err(Error::shape("empty image batch"));
        }
        let mut data = Vec::with_capacity(images.len() * cfg.n_patches() * cfg.d_patch);
        for img in images {
            img.check(cfg)?;
            data.extend(img.patch_features.iter().map(|&v| S::from_f64_lossy(v as f64)));
        }
        let x = Tensor::from_vec(data, &[images.len(), cfg.n_patches(), cfg.d_patch])?;
        Ok(x.matmul(&self.weight)?.add(&self.pos)?.detach())
    }
}

/// Trainable downsampling projector: group average pool, then `x · W + b`.
#[derive(Debug, Clone)]
pub struct VisionProjector<S: Scalar> {
    /// `[d_patch, d_model]`.
    pub weight: Tensor<S>,
    /// `[d_model]`.
    pub bias: Tensor<S>,
}

impl<S: Scalar> VisionProjector<S> {
    /// `[.., n_patches, d_patch]` to `[.., n_vision_tokens, d_model]`.
    pub fn project(&self, patches: &Tensor<S>, cfg: &VlmConfig) -> Result<Tensor<S>> {
        let pooled = patches.group_mean(cfg.n_vision_tokens)?;
        pooled.matmul(&self.weight)?.add(&self.bias)
    }
}

/// Frozen token table plus fixed positions. Text position `i` sits at sequence
/// index `n_vision_tokens + i`.
#[derive(Debug, Clone)]
pub struct TextEmbedding<S: Scalar> {
    /// `[vocab_size, d_model]`.
    pub table: Tensor<S>,
    /// `[max_text_tokens, d_model]`.
    pub pos: Tensor<S>,
}

impl<S: Scalar> TextEmbedding<S> {
    fn check_ids(ids: &[u32], cfg: &VlmConfig) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::EmptySequence);
        }
        if ids.len() > cfg.max_text_tokens {
            return Err(Error::SequenceTooLong { len: ids.len(), max: cfg.max_text_tokens });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(Error::InvalidTokenId { id: id as usize, vocab: cfg.vocab_size });
        }
        Ok(())
    }

    pub fn embed(&self, ids: &[u32], cfg: &VlmConfig) -> Result<Tensor<S>> {
        self.embed_batch(&[ids.to_vec()], cfg)?.reshape(&[ids.len(), cfg.d_model])
    }

    /// Right-padded `[B, max_len, d_model]`; pad slots use [`PAD_ID`].
    pub fn embed_batch(&self, seqs: &[Vec<u32>], cfg: &VlmConfig) -> Result<Tensor<S>> {
        if seqs.is_empty() {
            return Err(Error::shape("empty text batch"));
        }
        for s in seqs {
            Self::check_ids(s, cfg)?;
        }
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let d = cfg.d_model;
        let (table, pos) = (self.table.data(), self.pos.data());
        let mut data = Vec::with_capacity(seqs.len() * len * d);
        for s in seqs {
            for i in 0..len {
                let id = s.get(i).copied().unwrap_or(PAD_ID) as usize;
                let row = &table[id * d..(id + 1) * d];
                let p = &pos[i * d..(i + 1) * d];
                data.extend(row.iter().zip(p).map(|(&a, &b)| a + b));
            }
        }
        Tensor::from_vec(data, &[seqs.len(), len, d])
    }
}
