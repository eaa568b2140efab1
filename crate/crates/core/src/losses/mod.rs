//! Cross-modal alignment distillation objective.

mod config;
mod projector;

pub use config::{AttnBlock, FocusReduction, LossConfig};
pub use projector::{EmbedProjector, HeadProjector, KdProjectors};

use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};
use crate::tensor::ops::{cross_entropy_masked, mse};
use crate::tensor::Tensor;

/// The three lower-triangular blocks of a `[H, L, L]` causal attention tensor
/// whose sequence is `[vision ; text]`.
#[derive(Debug, Clone)]
pub struct AttentionSplit<S: Scalar> {
    /// `[H, N_v, N_v]`
    pub a_vv: Tensor<S>,
    /// `[H, N_t, N_v]`
    pub a_tv: Tensor<S>,
    /// `[H, N_t, N_t]`
    pub a_tt: Tensor<S>,
}

fn check_causal<S: Scalar>(attn: &Tensor<S>) -> Result<()> {
    let (h, l) = (attn.shape()[0], attn.shape()[1]);
    let data = attn.data();
    for head in 0..h {
        for row in 0..l {
            let base = (head * l + row) * l;
            if let Some(off) = data[base + row + 1..base + l].iter().position(|&v| v != S::zero()) {
                return Err(Error::NotCausal { head, row, col: row + 1 + off });
            }
        }
    }
    Ok(())
}

pub fn split_attention<S: Scalar>(attn: &Tensor<S>, n_vision: usize) -> Result<AttentionSplit<S>> {
    let s = attn.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::shape(format!("attention must be [H, L, L], got {s:?}")));
    }
    let l = s[1];
    if n_vision == 0 || n_vision >= l {
        return Err(Error::BadPartition { n_vision, len: l });
    }
    check_causal(attn)?;
    let nt = l - n_vision;
    let vis_rows = attn.narrow(1, 0, n_vision)?;
    let txt_rows = attn.narrow(1, n_vision, nt)?;
    Ok(AttentionSplit {
        a_vv: vis_rows.narrow(2, 0, n_vision)?,
        a_tv: txt_rows.narrow(2, 0, n_vision)?,
        a_tt: txt_rows.narrow(2, n_vision, nt)?,
    })
}

impl<S: Scalar> AttentionSplit<S> {
    /// Rebuild the full `[H, L, L]` matrix with a zero upper-right block.
    pub fn reassemble(&self) -> Result<Tensor<S>> {
        let (h, nv) = (self.a_vv.shape()[0], self.a_vv.shape()[1]);
        let nt = self.a_tt.shape()[1];
        let top = Tensor::concat(&[self.a_vv.clone(), Tensor::zeros(&[h, nv, nt])], 2)?;
        let bottom = Tensor::concat(&[self.a_tv.clone(), self.a_tt.clone()], 2)?;
        Tensor::concat(&[top, bottom], 1)
    }
}

/// MSE between the head-mixed teacher attention block and the student block.
/// Works for any `[H, rows, cols]` block; the text-query-vision block is the default use.
pub fn attn_tv_loss<S: Scalar>(teacher: &Tensor<S>, student: &Tensor<S>, p: &HeadProjector<S>) -> Result<Tensor<S>> {
    if teacher.rank() != 3 || student.rank() != 3 || teacher.shape()[1..] != student.shape()[1..] {
        return Err(Error::shape(format!(
            "attention blocks differ: teacher {:?}, student {:?}",
            teacher.shape(),
            student.shape()
        )));
    }
    mse(&p.apply(teacher)?, student)
}

/// Per-vision-token score: column sums over text queries, reduced over heads.
pub fn focus_scores<S: Scalar>(teacher_tv: &Tensor<S>, reduction: FocusReduction) -> Result<Tensor<S>> {
    if teacher_tv.rank() != 3 {
        return Err(Error::shape(format!("expected [H, N_t, N_v], got {:?}", teacher_tv.shape())));
    }
    let (h, nt, nv) = (teacher_tv.shape()[0], teacher_tv.shape()[1], teacher_tv.shape()[2]);
    let a = teacher_tv.data();
    if let Some(&neg) = a.iter().find(|&&v| v < S::zero()) {
        return Err(Error::NegativeAttention(neg.to_f64_lossy()));
    }
    let mut scores = vec![S::zero(); nv];
    for head in 0..h {
        for m in 0..nt {
            let row = &a[(head * nt + m) * nv..(head * nt + m + 1) * nv];
            for (s, &v) in scores.iter_mut().zip(row) {
                *s += v;
            }
        }
    }
    if reduction == FocusReduction::Mean {
        let inv = S::one() / S::from_usize_lossy(h);
        scores.iter_mut().for_each(|s| *s *= inv);
    }
    drop(a);
    Tensor::from_vec(scores, &[nv])
}

/// Positions of the `k` largest scores, ties to the lower index, ascending.
pub fn topk_indices<S: Scalar>(scores: &Tensor<S>, k: usize) -> Result<Vec<usize>> {
    let s = scores.data();
    if k == 0 || k > s.len() {
        return Err(Error::BadK { k, n: s.len() });
    }
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut idx = order[..k].to_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// MSE between projected teacher rows and student rows at `idx` only.
pub fn vision_focus_loss<S: Scalar>(
    teacher_emb: &Tensor<S>,
    student_emb: &Tensor<S>,
    idx: &[usize],
    p: &EmbedProjector<S>,
) -> Result<Tensor<S>> {
    if idx.is_empty() {
        return Err(Error::BadK { k: 0, n: teacher_emb.shape()[0] });
    }
    check_rows(teacher_emb, student_emb)?;
    let t = teacher_emb.index_select(0, idx)?;
    let s = student_emb.index_select(0, idx)?;
    mse(&p.apply(&t)?, &s)
}

/// MSE between all projected teacher rows and all student rows.
pub fn vision_all_loss<S: Scalar>(teacher_emb: &Tensor<S>, student_emb: &Tensor<S>, p: &EmbedProjector<S>) -> Result<Tensor<S>> {
    check_rows(teacher_emb, student_emb)?;
    let n = teacher_emb.shape()[0];
    let all: Vec<usize> = (0..n).collect();
    mse(&p.apply(&teacher_emb.index_select(0, &all)?)?, &student_emb.index_select(0, &all)?)
}

fn check_rows<S: Scalar>(t: &Tensor<S>, s: &Tensor<S>) -> Result<()> {
    if t.rank() != 2 || s.rank() != 2 || t.shape()[0] != s.shape()[0] {
        return Err(Error::shape(format!("vision embeddings {:?} vs {:?}", t.shape(), s.shape())));
    }
    Ok(())
}

/// `l_all + lambda · l_focus`.
pub fn vision_loss<S: Scalar>(l_all: &Tensor<S>, l_focus: &Tensor<S>, lambda: f64) -> Result<Tensor<S>> {
    if !(lambda >= 0.0) {
        return Err(Error::NegativeLambda(lambda));
    }
    l_all.add(&l_focus.scale(c(lambda)))
}

/// Reverse KL divergence `KL(p_student ‖ p_teacher)` averaged over masked-in rows.
///
/// The teacher side is a constant. `floor`, when set, clamps teacher
/// probabilities from below inside the logarithm.
pub fn rkld<S: Scalar>(
    student_logits: &Tensor<S>,
    teacher_logits: &Tensor<S>,
    mask: &[bool],
    floor: Option<f64>,
) -> Result<Tensor<S>> {
    let (ss, ts) = (student_logits.shape(), teacher_logits.shape());
    if ss.len() != 2 || ts.len() != 2 || ss[0] != ts[0] || mask.len() != ss[0] {
        return Err(Error::shape(format!("rkld shapes {ss:?}, {ts:?}, mask {}", mask.len())));
    }
    if ss[1] != ts[1] {
        return Err(Error::VocabMismatch { student: ss[1], teacher: ts[1] });
    }
    let rows: Vec<usize> = mask.iter().enumerate().filter_map(|(i, &m)| m.then_some(i)).collect();
    if rows.is_empty() {
        return Err(Error::EmptyMask);
    }
    let teacher = teacher_logits.detach().index_select(0, &rows)?;
    let log_pt = teacher.log_softmax_rows()?;
    let log_pt = match floor {
        Some(eps) => {
            let eps: S = c(eps);
            let data = log_pt.data().iter().map(|&v| v.exp().max(eps).ln()).collect();
            Tensor::from_vec(data, log_pt.shape())?
        }
        None => log_pt.detach(),
    };
    let log_ps = student_logits.index_select(0, &rows)?.log_softmax_rows()?;
    let per = log_ps.exp().mul(&log_ps.sub(&log_pt)?)?;
    Ok(per.sum().scale(S::one() / S::from_usize_lossy(rows.len())))
}

/// Unweighted sum of the four objective terms.
pub fn total_loss<S: Scalar>(
    l_sup: &Tensor<S>,
    l_attn_tv: &Tensor<S>,
    l_v: &Tensor<S>,
    l_rkld: &Tensor<S>,
) -> Result<Tensor<S>> {
    for (name, t) in [("l_sup", l_sup), ("l_attn_tv", l_attn_tv), ("l_v", l_v), ("l_rkld", l_rkld)] {
        if !t.item().is_finite() {
            return Err(Error::NonFiniteComponent(name));
        }
    }
    l_sup.add(l_attn_tv)?.add(l_v)?.add(l_rkld)
}

/// Scalar values of every objective term.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossReport {
    pub l_sup: f64,
    pub l_attn_tv: f64,
    pub l_v_focus: f64,
    pub l_v_all: f64,
    pub l_v: f64,
    pub l_rkld: f64,
    pub total: f64,
    pub focus_indices: Vec<usize>,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,lr,l_sup,l_attn_tv,l_v_focus,l_v_all,l_v,l_rkld,total";

    pub fn components(&self) -> [(&'static str, f64); 7] {
        [
            ("l_sup", self.l_sup),
            ("l_attn_tv", self.l_attn_tv),
            ("l_v_focus", self.l_v_focus),
            ("l_v_all", self.l_v_all),
            ("l_v", self.l_v),
            ("l_rkld", self.l_rkld),
            ("total", self.total),
        ]
    }

    /// Largest violation of `l_v = l_all + λ·l_focus` and `total = Σ terms`.
    pub fn identity_error(&self, lambda: f64) -> f64 {
        let ev = (self.l_v - (self.l_v_all + lambda * self.l_v_focus)).abs();
        let et = (self.total - (self.l_sup + self.l_attn_tv + self.l_v + self.l_rkld)).abs();
        ev.max(et)
    }

    pub fn csv_row(&self, step: usize, lr: f64) -> String {
        let mut row = format!("{step},{lr:e}");
        for (_, v) in self.components() {
            row.push_str(&format!(",{v:e}"));
        }
        row
    }

    /// Accumulate `w · other` into `self`, taking focus indices from the first call.
    pub fn add_weighted(&mut self, other: &LossReport, w: f64) {
        self.l_sup += w * other.l_sup;
        self.l_attn_tv += w * other.l_attn_tv;
        self.l_v_focus += w * other.l_v_focus;
        self.l_v_all += w * other.l_v_all;
        self.l_v += w * other.l_v;
        self.l_rkld += w * other.l_rkld;
        self.total += w * other.total;
        if self.focus_indices.is_empty() {
            self.focus_indices = other.focus_indices.clone();
        }
    }
}

/// Teacher-side quantities for one sample. All constants.
#[derive(Debug, Clone)]
pub struct TeacherSignals<S: Scalar> {
    /// `[H_T, L, L]`
    pub attn_first: Tensor<S>,
    pub attn_last: Option<Tensor<S>>,
    /// `[N_v, d_T]`
    pub vision: Tensor<S>,
    /// `[T, V]` logits at the loss rows only.
    pub logits: Tensor<S>,
}

/// Student-side quantities for one sample, still attached to the graph.
#[derive(Debug, Clone)]
pub struct StudentSignals<S: Scalar> {
    pub attn_first: Tensor<S>,
    pub attn_last: Option<Tensor<S>>,
    pub vision: Tensor<S>,
    /// `[L, V]` logits at every position.
    pub logits: Tensor<S>,
    pub n_vision: usize,
}

/// Graph tensors of every term for one sample.
#[derive(Debug, Clone)]
pub struct LossTerms<S: Scalar> {
    pub l_sup: Tensor<S>,
    pub l_attn_tv: Tensor<S>,
    pub l_v_focus: Tensor<S>,
    pub l_v_all: Tensor<S>,
    pub l_v: Tensor<S>,
    pub l_rkld: Tensor<S>,
    pub total: Tensor<S>,
    pub focus_indices: Vec<usize>,
}

impl<S: Scalar> LossTerms<S> {
    pub fn report(&self) -> LossReport {
        let f = |t: &Tensor<S>| t.item().to_f64_lossy();
        LossReport {
            l_sup: f(&self.l_sup),
            l_attn_tv: f(&self.l_attn_tv),
            l_v_focus: f(&self.l_v_focus),
            l_v_all: f(&self.l_v_all),
            l_v: f(&self.l_v),
            l_rkld: f(&self.l_rkld),
            total: f(&self.total),
            focus_indices: self.focus_indices.clone(),
        }
    }
}

fn attn_block<S: Scalar>(attn: &Tensor<S>, n_vision: usize, block: AttnBlock) -> Result<Tensor<S>> {
    let split = split_attention(attn, n_vision)?;
    Ok(match block {
        AttnBlock::Tv => split.a_tv,
        AttnBlock::Vv => split.a_vv,
        AttnBlock::Tt => split.a_tt,
        AttnBlock::All | AttnBlock::AllPlusLast => attn.clone(),
    })
}

/// Every enabled term for one teacher-forced sample. `targets` and `mask` are
/// indexed by sequence position; `mask` marks the response rows. The teacher
/// may be omitted only when no distillation term is enabled.
pub fn sample_losses<S: Scalar>(
    student: &StudentSignals<S>,
    teacher: Option<&TeacherSignals<S>>,
    targets: &[usize],
    mask: &[bool],
    proj: &KdProjectors<S>,
    cfg: &LossConfig,
) -> Result<LossTerms<S>> {
    let zero = || Tensor::scalar(S::zero());
    let l_sup = cross_entropy_masked(&student.logits, targets, mask)?;
    let (mut l_attn_tv, mut l_v_all, mut l_v_focus, mut l_rkld) = (zero(), zero(), zero(), zero());
    let mut focus_indices = Vec::new();
    if cfg.any_kd() {
        let t = teacher.ok_or_else(|| Error::Config("distillation enabled without teacher signals".into()))?;
        let nv = student.n_vision;
        if cfg.enable_attn_tv {
            let tb = attn_block(&t.attn_first, nv, cfg.attn_block)?;
            let sb = attn_block(&student.attn_first, nv, cfg.attn_block)?;
            l_attn_tv = attn_tv_loss(&tb, &sb, &proj.attn)?;
            if cfg.attn_block == AttnBlock::AllPlusLast {
                let missing = || Error::Config("all_plus_last needs last-layer attention".into());
                let tl = t.attn_last.as_ref().ok_or_else(missing)?;
                let sl = student.attn_last.as_ref().ok_or_else(missing)?;
                l_attn_tv = l_attn_tv.add(&attn_tv_loss(tl, sl, &proj.attn_last)?)?;
            }
        }
        if cfg.enable_v_all {
            l_v_all = vision_all_loss(&t.vision, &student.vision, &proj.embed)?;
        }
        if cfg.enable_v_focus {
            let tv = split_attention(&t.attn_first, nv)?.a_tv;
            focus_indices = topk_indices(&focus_scores(&tv, cfg.focus_reduction)?, cfg.k)?;
            l_v_focus = vision_focus_loss(&t.vision, &student.vision, &focus_indices, &proj.embed)?;
        }
        if cfg.enable_rkld {
            let rows: Vec<usize> = mask.iter().enumerate().filter_map(|(i, &m)| m.then_some(i)).collect();
            if rows.is_empty() {
                return Err(Error::EmptyMask);
            }
            let s_rows = student.logits.index_select(0, &rows)?;
            let floor = (cfg.rkld_floor > 0.0).then_some(cfg.rkld_floor);
            l_rkld = rkld(&s_rows, &t.logits, &vec![true; rows.len()], floor)?;
        }
    }
    let l_v = vision_loss(&l_v_all, &l_v_focus, cfg.lambda)?;
    let total = total_loss(&l_sup, &l_attn_tv, &l_v, &l_rkld)?;
    Ok(LossTerms { l_sup, l_attn_tv, l_v_focus, l_v_all, l_v, l_rkld, total, focus_indices })
}
