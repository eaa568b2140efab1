use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::scalar::{c, Precision, Scalar};
use crate::tensor::{Mask, Tensor};

use super::config::VlmConfig;
use super::embed::{sinusoid_table, ImageEmbedder, TextEmbedding, ToyImage, VisionProjector};

const LN_EPS: f64 = 1e-5;

/// Optimizer grouping of a named tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Frozen,
    Projector,
    Other,
}

#[derive(Debug, Clone)]
pub struct NamedTensor<S: Scalar> {
    pub name: String,
    pub tensor: Tensor<S>,
    pub group: ParamGroup,
}

/// One pre-norm decoder layer.
#[derive(Debug, Clone)]
pub struct Block<S: Scalar> {
    pub ln1_gain: Tensor<S>,
    pub ln1_bias: Tensor<S>,
    pub wq: Tensor<S>,
    pub wk: Tensor<S>,
    pub wv: Tensor<S>,
    pub wo: Tensor<S>,
    pub ln2_gain: Tensor<S>,
    pub ln2_bias: Tensor<S>,
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

struct BlockOut<S: Scalar> {
    x: Tensor<S>,
    attn: Tensor<S>,
}

impl<S: Scalar> Block<S> {
    fn new(cfg: &VlmConfig, rng: &mut ChaCha8Rng) -> Self {
        let (d, f) = (cfg.d_model, cfg.ffn_dim());
        let resid = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
        let std_d = 1.0 / (d as f64).sqrt();
        let std_f = 1.0 / (f as f64).sqrt();
        let ones = |n: usize| Tensor::full(&[n], S::one()).to_param();
        let zeros = |n: usize| Tensor::zeros(&[n]).to_param();
        Block {
            ln1_gain: ones(d),
            ln1_bias: zeros(d),
            wq: Tensor::randn(&[d, d], std_d, rng).to_param(),
            wk: Tensor::randn(&[d, d], std_d, rng).to_param(),
            wv: Tensor::randn(&[d, d], std_d, rng).to_param(),
            wo: Tensor::randn(&[d, d], std_d * resid, rng).to_param(),
            ln2_gain: ones(d),
            ln2_bias: zeros(d),
            w1: Tensor::randn(&[d, f], std_d, rng).to_param(),
            b1: zeros(f),
            w2: Tensor::randn(&[f, d], std_f * resid, rng).to_param(),
            b2: zeros(d),
        }
    }

    fn named(&self) -> [(&'static str, &Tensor<S>); 12] {
        [
            ("ln1.gain", &self.ln1_gain),
            ("ln1.bias", &self.ln1_bias),
            ("attn.wq", &self.wq),
            ("attn.wk", &self.wk),
            ("attn.wv", &self.wv),
            ("attn.wo", &self.wo),
            ("ln2.gain", &self.ln2_gain),
            ("ln2.bias", &self.ln2_bias),
            ("ffn.w1", &self.w1),
            ("ffn.b1", &self.b1),
            ("ffn.w2", &self.w2),
            ("ffn.b2", &self.b2),
        ]
    }

    /// `x`: `[B, L, d]`.
    fn forward(&self, x: &Tensor<S>, cfg: &VlmConfig, mask: &Mask) -> Result<BlockOut<S>> {
        let (b, l, d) = (x.shape()[0], x.shape()[1], cfg.d_model);
        let (h, dh) = (cfg.n_heads, cfg.head_dim());
        let eps: S = c(LN_EPS);
        let xn = x.layer_norm(&self.ln1_gain, &self.ln1_bias, eps)?;
        let heads = |w: &Tensor<S>| -> Result<Tensor<S>> {
            xn.matmul(w)?.reshape(&[b, l, h, dh])?.permute(&[0, 2, 1, 3])
        };
        let (q, k, v) = (heads(&self.wq)?, heads(&self.wk)?, heads(&self.wv)?);
        let scores = q.matmul_t(&k)?.scale(c::<S>(1.0 / (dh as f64).sqrt()));
        let attn = scores.softmax_rows(Some(mask))?;
        let ctx = attn.matmul(&v)?.permute(&[0, 2, 1, 3])?.reshape(&[b, l, d])?;
        let x = x.add(&ctx.matmul(&self.wo)?)?;
        let xn = x.layer_norm(&self.ln2_gain, &self.ln2_bias, eps)?;
        let ff = xn.matmul(&self.w1)?.add(&self.b1)?.gelu().matmul(&self.w2)?.add(&self.b2)?;
        Ok(BlockOut { x: x.add(&ff)?, attn })
    }
}

/// Per-sample record of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<S: Scalar> {
    /// `n_layers + 1` states `[L, d_model]`: input embeddings, then every layer output.
    pub hidden: Vec<Tensor<S>>,
    /// `[n_heads, L, L]` post-softmax attention of the first layer.
    pub attn_first: Tensor<S>,
    pub attn_last: Option<Tensor<S>>,
    /// `[L, vocab_size]`.
    pub logits: Tensor<S>,
    pub n_vision: usize,
    pub n_text: usize,
}

/// Batched record over right-padded text.
#[derive(Debug, Clone)]
pub struct BatchTrace<S: Scalar> {
    /// `[B, n_vision, d_model]` projector outputs.
    pub vision: Tensor<S>,
    /// Each `[B, L, d_model]`.
    pub hidden: Vec<Tensor<S>>,
    /// `[B, n_heads, L, L]`.
    pub attn_first: Tensor<S>,
    pub attn_last: Option<Tensor<S>>,
    /// `[B, L, vocab_size]`.
    pub logits: Tensor<S>,
    pub n_vision: usize,
    /// Unpadded text length of each sample.
    pub text_lens: Vec<usize>,
}

/// Take sample `b` from axis 0 and keep the first `len` entries of each axis in `axes`.
fn slice_sample<S: Scalar>(t: &Tensor<S>, b: usize, len: usize, axes: &[usize]) -> Result<Tensor<S>> {
    let mut out = if t.shape()[0] == 1 { t.clone() } else { t.narrow(0, b, 1)? };
    for &a in axes {
        if out.shape()[a] != len {
            out = out.narrow(a, 0, len)?;
        }
    }
    let shape = out.shape()[1..].to_vec();
    out.reshape(&shape)
}

impl<S: Scalar> BatchTrace<S> {
    pub fn batch_size(&self) -> usize {
        self.text_lens.len()
    }

    pub fn seq_len(&self, b: usize) -> usize {
        self.n_vision + self.text_lens[b]
    }

    /// `[n_vision, d_model]` vision tokens of sample `b`.
    pub fn sample_vision(&self, b: usize) -> Result<Tensor<S>> {
        slice_sample(&self.vision, b, self.n_vision, &[])
    }

    pub fn sample_hidden(&self, b: usize, layer: usize) -> Result<Tensor<S>> {
        slice_sample(&self.hidden[layer], b, self.seq_len(b), &[1])
    }

    pub fn sample_attn_first(&self, b: usize) -> Result<Tensor<S>> {
        slice_sample(&self.attn_first, b, self.seq_len(b), &[2, 3])
    }

    pub fn sample_attn_last(&self, b: usize) -> Result<Option<Tensor<S>>> {
        self.attn_last.as_ref().map(|a| slice_sample(a, b, self.seq_len(b), &[2, 3])).transpose()
    }

    pub fn sample_logits(&self, b: usize) -> Result<Tensor<S>> {
        slice_sample(&self.logits, b, self.seq_len(b), &[1])
    }

    pub fn sample(&self, b: usize) -> Result<ForwardTrace<S>> {
        Ok(ForwardTrace {
            hidden: (0..self.hidden.len()).map(|i| self.sample_hidden(b, i)).collect::<Result<_>>()?,
            attn_first: self.sample_attn_first(b)?,
            attn_last: self.sample_attn_last(b)?,
            logits: self.sample_logits(b)?,
            n_vision: self.n_vision,
            n_text: self.text_lens[b],
        })
    }
}

/// Miniature vision-language model: frozen patch embedder, trainable pooling
/// projector, frozen token table, pre-norm causal decoder and a head tied to
/// the token table.
#[derive(Debug, Clone)]
pub struct Vlm<S: Scalar> {
    pub cfg: VlmConfig,
    pub image: ImageEmbedder<S>,
    pub projector: VisionProjector<S>,
    pub text: TextEmbedding<S>,
    pub blocks: Vec<Block<S>>,
    pub final_gain: Tensor<S>,
    pub final_bias: Tensor<S>,
}

impl<S: Scalar> Vlm<S> {
    pub fn new(cfg: &VlmConfig) -> Result<Self> {
        cfg.validate()?;
        let mut frozen_rng = ChaCha8Rng::seed_from_u64(cfg.frozen_seed);
        let (d, dp, np) = (cfg.d_model, cfg.d_patch, cfg.n_patches());
        let image = ImageEmbedder {
            weight: Tensor::randn(&[dp, dp], 1.0 / (dp as f64).sqrt(), &mut frozen_rng),
            pos: Tensor::from_f64(&sinusoid_table(np, dp, 0), &[np, dp])?,
        };
        let text = TextEmbedding {
            table: Tensor::randn(&[cfg.vocab_size, d], 1.0, &mut frozen_rng),
            pos: Tensor::from_f64(
                &sinusoid_table(cfg.max_text_tokens, d, cfg.n_vision_tokens),
                &[cfg.max_text_tokens, d],
            )?,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let projector = VisionProjector {
            weight: Tensor::randn(&[dp, d], 1.0 / (dp as f64).sqrt(), &mut rng).to_param(),
            bias: Tensor::zeros(&[d]).to_param(),
        };
        let blocks = (0..cfg.n_layers).map(|_| Block::new(cfg, &mut rng)).collect();
        Ok(Vlm {
            cfg: cfg.clone(),
            image,
            projector,
            text,
            blocks,
            final_gain: Tensor::full(&[d], S::one()).to_param(),
            final_bias: Tensor::zeros(&[d]).to_param(),
        })
    }

    /// Every tensor in a fixed order, frozen ones included.
    pub fn named_tensors(&self) -> Vec<NamedTensor<S>> {
        let mut out = Vec::new();
        let mut push = |name: String, t: &Tensor<S>, group| {
            out.push(NamedTensor { name, tensor: t.clone(), group })
        };
        push("frozen.patch_embed".into(), &self.image.weight, ParamGroup::Frozen);
        push("frozen.patch_pos".into(), &self.image.pos, ParamGroup::Frozen);
        push("frozen.text_table".into(), &self.text.table, ParamGroup::Frozen);
        push("frozen.text_pos".into(), &self.text.pos, ParamGroup::Frozen);
        push("projector.weight".into(), &self.projector.weight, ParamGroup::Projector);
        push("projector.bias".into(), &self.projector.bias, ParamGroup::Projector);
        for (i, block) in self.blocks.iter().enumerate() {
            for (name, t) in block.named() {
                push(format!("layers.{i}.{name}"), t, ParamGroup::Other);
            }
        }
        push("final_ln.gain".into(), &self.final_gain, ParamGroup::Other);
        push("final_ln.bias".into(), &self.final_bias, ParamGroup::Other);
        out
    }

    pub fn trainable(&self) -> Vec<NamedTensor<S>> {
        self.named_tensors().into_iter().filter(|t| t.group != ParamGroup::Frozen).collect()
    }

    pub fn frozen(&self) -> Vec<NamedTensor<S>> {
        self.named_tensors().into_iter().filter(|t| t.group == ParamGroup::Frozen).collect()
    }

    pub fn zero_grad(&self) {
        for p in self.trainable() {
            p.tensor.zero_grad();
        }
    }

    /// Independent copy with its own parameter storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let m = Self::new(&self.cfg)?;
        for (dst, src) in m.named_tensors().iter().zip(self.named_tensors()) {
            dst.tensor.data_mut().copy_from_slice(&src.tensor.data());
        }
        Ok(m)
    }

    /// Turn every trainable tensor into a constant so no graph is recorded.
    pub fn freeze(&mut self) {
        let f = |t: &mut Tensor<S>| *t = t.detach();
        f(&mut self.projector.weight);
        f(&mut self.projector.bias);
        for b in &mut self.blocks {
            for t in [
                &mut b.ln1_gain,
                &mut b.ln1_bias,
                &mut b.wq,
                &mut b.wk,
                &mut b.wv,
                &mut b.wo,
                &mut b.ln2_gain,
                &mut b.ln2_bias,
                &mut b.w1,
                &mut b.b1,
                &mut b.w2,
                &mut b.b2,
            ] {
                f(t);
            }
        }
        f(&mut self.final_gain);
        f(&mut self.final_bias);
    }

    /// Zero every attention output and feed-forward output weight so each layer
    /// returns its input unchanged.
    pub fn zero_residual_branches(&self) {
        for b in &self.blocks {
            for t in [&b.wo, &b.w2, &b.b2] {
                t.data_mut().iter_mut().for_each(|v| *v = S::zero());
            }
        }
    }

    pub fn embed_image(&self, img: &ToyImage) -> Result<Tensor<S>> {
        self.image.embed(img, &self.cfg)
    }

    pub fn project_vision(&self, patches: &Tensor<S>) -> Result<Tensor<S>> {
        self.projector.project(patches, &self.cfg)
    }

    pub fn embed_text(&self, ids: &[u32]) -> Result<Tensor<S>> {
        self.text.embed(ids, &self.cfg)
    }

    /// `[B, n_vision, d_model]` vision tokens for a batch of images.
    pub fn vision_tokens(&self, images: &[ToyImage]) -> Result<Tensor<S>> {
        self.projector.project(&self.image.embed_batch(images, &self.cfg)?, &self.cfg)
    }

    /// Run the decoder on `[n_vision, d]` vision tokens and `[n_text, d]` text embeddings.
    pub fn forward(&self, vision: &Tensor<S>, text: &Tensor<S>, capture_last: bool) -> Result<ForwardTrace<S>> {
        let d = self.cfg.d_model;
        if vision.rank() != 2 || text.rank() != 2 || vision.shape()[1] != d || text.shape()[1] != d {
            return Err(Error::shape(format!(
                "forward expects [n, {d}] inputs, got {:?} and {:?}",
                vision.shape(),
                text.shape()
            )));
        }
        let (nv, nt) = (vision.shape()[0], text.shape()[0]);
        let v = vision.reshape(&[1, nv, d])?;
        let t = text.reshape(&[1, nt, d])?;
        self.forward_embedded(&v, &t, vec![nt], capture_last)?.sample(0)
    }

    /// Decoder over `[B, Nv, d]` vision tokens and right-padded `[B, Lt, d]` text.
    pub fn forward_embedded(
        &self,
        vision: &Tensor<S>,
        text: &Tensor<S>,
        text_lens: Vec<usize>,
        capture_last: bool,
    ) -> Result<BatchTrace<S>> {
        let d = self.cfg.d_model;
        if vision.rank() != 3 || text.rank() != 3 || vision.shape()[2] != d || text.shape()[2] != d {
            return Err(Error::shape(format!(
                "decoder expects [B, n, {d}] inputs, got {:?} and {:?}",
                vision.shape(),
                text.shape()
            )));
        }
        if vision.shape()[0] != text.shape()[0] || text_lens.len() != text.shape()[0] {
            return Err(Error::shape("vision, text and length batch sizes differ"));
        }
        let n_vision = vision.shape()[1];
        let x0 = Tensor::concat(&[vision.clone(), text.clone()], 1)?;
        let mask = Mask::causal(x0.shape()[1]);
        let mut hidden = vec![x0];
        let mut attn_first = None;
        let mut attn_last = None;
        let last = self.blocks.len() - 1;
        for (i, block) in self.blocks.iter().enumerate() {
            let out = block.forward(hidden.last().expect("nonempty"), &self.cfg, &mask)?;
            if i == 0 {
                attn_first = Some(out.attn.clone());
            }
            if i == last && capture_last {
                attn_last = Some(out.attn);
            }
            hidden.push(out.x);
        }
        let xf = hidden[last + 1].layer_norm(&self.final_gain, &self.final_bias, c(LN_EPS))?;
        let logits = xf.matmul_t(&self.text.table)?.scale(c::<S>(1.0 / (d as f64).sqrt()));
        Ok(BatchTrace {
            vision: vision.clone(),
            hidden,
            attn_first: attn_first.expect("at least one layer"),
            attn_last,
            logits,
            n_vision,
            text_lens,
        })
    }

    /// Full pipeline from raw images and token ids.
    pub fn forward_batch(&self, images: &[ToyImage], texts: &[Vec<u32>], capture_last: bool) -> Result<BatchTrace<S>> {
        if images.len() != texts.len() {
            return Err(Error::shape(format!("{} images for {} texts", images.len(), texts.len())));
        }
        let vision = self.vision_tokens(images)?;
        let text = self.text.embed_batch(texts, &self.cfg)?;
        self.forward_embedded(&vision, &text, texts.iter().map(Vec::len).collect(), capture_last)
    }

    /// Greedy decoding after `prompt`. The returned continuation includes the
    /// end-of-sequence id if one was produced. Generation also stops when the
    /// text would exceed `max_text_tokens`.
    pub fn generate_greedy(&self, img: &ToyImage, prompt: &[u32], max_new: usize, eos: u32) -> Result<Vec<u32>> {
        if prompt.is_empty() {
            return Err(Error::EmptySequence);
        }
        let vision = self.vision_tokens(std::slice::from_ref(img))?.detach();
        let mut seq = prompt.to_vec();
        let mut out = Vec::new();
        while out.len() < max_new && seq.len() < self.cfg.max_text_tokens {
            let text = self.text.embed_batch(std::slice::from_ref(&seq), &self.cfg)?;
            let trace = self.forward_embedded(&vision, &text, vec![seq.len()], false)?;
            let v = self.cfg.vocab_size;
            let l = trace.logits.shape()[1];
            let logits = trace.logits.data();
            let row = &logits[(l - 1) * v..l * v];
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            let tok = best as u32;
            out.push(tok);
            seq.push(tok);
            if tok == eos {
                break;
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, precision: Precision) -> Checkpoint {
        let mut ck = Checkpoint::default();
        for (k, v) in self.cfg.to_kv() {
            ck.set(&k, v);
        }
        ck.set("precision", precision);
        for t in self.named_tensors() {
            ck.push(t.name, &t.tensor);
        }
        ck
    }

    /// Rebuild a model from a checkpoint written by [`Vlm::to_checkpoint`].
    /// Extra tensors (optimizer state, distillation projectors) are ignored.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let kv: BTreeMap<String, String> = ck.header.iter().cloned().collect();
        let cfg = VlmConfig::from_kv(&kv)?;
        let model = Self::new(&cfg)?;
        for t in model.named_tensors() {
            let stored = ck.load_shaped::<S>(&t.name, t.tensor.shape())?;
            t.tensor.data_mut().copy_from_slice(&stored.data());
        }
        Ok(model)
    }
}
