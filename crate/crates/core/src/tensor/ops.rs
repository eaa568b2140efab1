use super::kernels::{self, broadcast_index, broadcast_shape};
use super::{numel, Mask, Op, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};

pub(crate) struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
    /// `b` is a plain matrix shared by every batch of `a`: run one flattened product.
    pub flat: bool,
    pub a_batch: Vec<usize>,
    pub b_batch: Vec<usize>,
}

pub(crate) fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape(format!("matmul needs rank >= 2, got {a:?} x {b:?}")));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::shape(format!("matmul inner dimensions differ: {a:?} x {b:?}")));
    }
    let ab = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    if bb.is_empty() {
        let mut out_shape = ab.to_vec();
        out_shape.extend([m, n]);
        return Ok(MatmulPlan { m, k, n, out_shape, flat: true, a_batch: vec![], b_batch: vec![] });
    }
    let batch = broadcast_shape(ab, bb)?;
    let nb = numel(&batch);
    let a_batch = broadcast_index(ab, &batch).unwrap_or_else(|| (0..nb).collect());
    let b_batch = broadcast_index(bb, &batch).unwrap_or_else(|| (0..nb).collect());
    let mut out_shape = batch;
    out_shape.extend([m, n]);
    Ok(MatmulPlan { m, k, n, out_shape, flat: false, a_batch, b_batch })
}

fn check_axis(axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(Error::shape(format!("axis {axis} out of range for rank {rank}")));
    }
    Ok(())
}

fn gelu_value(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (K * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_deriv<S: Scalar>(x: S) -> S {
    let k: S = c(0.797_884_560_802_865_4);
    let a: S = c(0.044715);
    let inner = k * (x + a * x * x * x);
    let t = inner.tanh();
    let half: S = c(0.5);
    half * (S::one() + t) + half * x * (S::one() - t * t) * k * (S::one() + c::<S>(3.0) * a * x * x)
}

impl<S: Scalar> Tensor<S> {
    fn zip_broadcast(&self, other: &Tensor<S>, f: impl Fn(S, S) -> S) -> Result<(Vec<usize>, Vec<S>)> {
        let shape = broadcast_shape(self.shape(), other.shape())?;
        let (a, b) = (self.data(), other.data());
        let ma = broadcast_index(self.shape(), &shape);
        let mb = broadcast_index(other.shape(), &shape);
        let n = numel(&shape);
        let data = match (&ma, &mb) {
            (None, None) => a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..n)
                .map(|o| {
                    let ia = ma.as_ref().map_or(o, |m| m[o]);
                    let ib = mb.as_ref().map_or(o, |m| m[o]);
                    f(a[ia], b[ib])
                })
                .collect(),
        };
        Ok((shape, data))
    }

    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (shape, data) = self.zip_broadcast(other, |x, y| x + y)?;
        Ok(Tensor::from_op(shape, data, Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (shape, data) = self.zip_broadcast(other, |x, y| x - y)?;
        Ok(Tensor::from_op(shape, data, Op::Sub(self.clone(), other.clone())))
    }

    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (shape, data) = self.zip_broadcast(other, |x, y| x * y)?;
        Ok(Tensor::from_op(shape, data, Op::Mul(self.clone(), other.clone())))
    }

    pub fn scale(&self, factor: S) -> Tensor<S> {
        let data = self.data().iter().map(|&x| x * factor).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Scale(self.clone(), factor))
    }

    pub fn add_scalar(&self, value: S) -> Tensor<S> {
        let data = self.data().iter().map(|&x| x + value).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::AddScalar(self.clone()))
    }

    pub fn neg(&self) -> Tensor<S> {
        self.scale(-S::one())
    }

    pub fn exp(&self) -> Tensor<S> {
        let data = self.data().iter().map(|&x| x.exp()).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Exp(self.clone()))
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&self) -> Result<Tensor<S>> {
        let data = self.data();
        if let Some(bad) = data.iter().find(|&&x| !(x > S::zero())) {
            return Err(Error::DomainError(format!("log of non-positive value {bad}")));
        }
        let out = data.iter().map(|&x| x.ln()).collect();
        drop(data);
        Ok(Tensor::from_op(self.shape().to_vec(), out, Op::Log(self.clone())))
    }

    /// Elementwise map with a caller-supplied derivative.
    ///
    /// The derivative is trusted as given; [`grad_check`](super::grad_check)
    /// is how a wrong one gets caught.
    pub fn map_with_grad(&self, f: fn(S) -> S, deriv: fn(S) -> S) -> Tensor<S> {
        let data = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Map { input: self.clone(), deriv })
    }

    /// tanh-approximated GELU.
    pub fn gelu(&self) -> Tensor<S> {
        let data = self
            .data()
            .iter()
            .map(|&x| S::from_f64_lossy(gelu_value(x.to_f64_lossy())))
            .collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Gelu(self.clone()))
    }

    /// Batched matrix product over the last two axes.
    ///
    /// A rank-2 right operand is shared across all leading batches of `self`;
    /// otherwise leading batch axes broadcast.
    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let plan = matmul_plan(self.shape(), other.shape())?;
        let (a, b) = (self.data(), other.data());
        let mut out = vec![S::zero(); numel(&plan.out_shape)];
        let (m, k, n) = (plan.m, plan.k, plan.n);
        if plan.flat {
            kernels::gemm_nn(&a, &b, &mut out, a.len() / k, k, n);
        } else {
            for (ob, (&ia, &ib)) in plan.a_batch.iter().zip(&plan.b_batch).enumerate() {
                kernels::gemm_nn(
                    &a[ia * m * k..(ia + 1) * m * k],
                    &b[ib * k * n..(ib + 1) * k * n],
                    &mut out[ob * m * n..(ob + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        drop((a, b));
        Ok(Tensor::from_op(plan.out_shape, out, Op::MatMul(self.clone(), other.clone())))
    }

    /// `self · otherᵀ` over the last two axes.
    pub fn matmul_t(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.matmul(&other.transpose()?)
    }

    /// Swap the last two axes.
    pub fn transpose(&self) -> Result<Tensor<S>> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::shape(format!("transpose needs rank >= 2, got {:?}", self.shape())));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<S>> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(format!("invalid permutation {axes:?} for rank {r}")));
        }
        let data = kernels::permute(&self.data(), self.shape(), axes);
        let shape = axes.iter().map(|&a| self.shape()[a]).collect();
        Ok(Tensor::from_op(shape, data, Op::Permute { input: self.clone(), axes: axes.to_vec() }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<S>> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(Error::shape(format!("cannot reshape {:?} into {shape:?}", self.shape())));
        }
        Ok(Tensor::from_op(shape.to_vec(), self.to_vec(), Op::Reshape(self.clone())))
    }

    /// Join tensors along `axis`; all other axes must agree.
    pub fn concat(parts: &[Tensor<S>], axis: usize) -> Result<Tensor<S>> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let rank = first.rank();
        check_axis(axis, rank)?;
        for p in parts {
            let same = p.rank() == rank
                && (0..rank).all(|d| d == axis || p.shape()[d] == first.shape()[d]);
            if !same {
                return Err(Error::shape(format!(
                    "concat along {axis}: {:?} vs {:?}",
                    first.shape(),
                    p.shape()
                )));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = p.shape()[axis] * inner;
                data.extend_from_slice(&p.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op(shape, data, Op::Concat { parts: parts.to_vec(), axis }))
    }

    /// Gather the given positions along `axis` (repeats allowed).
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Tensor<S>> {
        check_axis(axis, self.rank())?;
        let len = self.shape()[axis];
        if indices.is_empty() {
            return Err(Error::shape("index_select with no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::IndexOutOfRange { index: bad, len });
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let src = self.data();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let start = (o * len + i) * inner;
                data.extend_from_slice(&src[start..start + inner]);
            }
        }
        drop(src);
        let mut shape = self.shape().to_vec();
        shape[axis] = indices.len();
        Ok(Tensor::from_op(
            shape,
            data,
            Op::IndexSelect { input: self.clone(), axis, indices: indices.to_vec() },
        ))
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<S>> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.index_select(axis, &idx)
    }

    /// Average-pool consecutive rows of the second-to-last axis into `groups` groups.
    pub fn group_mean(&self, groups: usize) -> Result<Tensor<S>> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::shape("group_mean needs rank >= 2"));
        }
        let rows = self.shape()[r - 2];
        if groups == 0 || rows % groups != 0 {
            return Err(Error::IndivisibleGrouping { patches: rows, groups });
        }
        let width = self.shape()[r - 1];
        let size = rows / groups;
        let outer = self.numel() / (rows * width);
        let inv = S::one() / S::from_usize_lossy(size);
        let src = self.data();
        let mut data = vec![S::zero(); outer * groups * width];
        for o in 0..outer {
            for g in 0..groups {
                let dst = &mut data[(o * groups + g) * width..(o * groups + g + 1) * width];
                for row in g * size..(g + 1) * size {
                    let s = &src[(o * rows + row) * width..(o * rows + row + 1) * width];
                    for (d, &v) in dst.iter_mut().zip(s) {
                        *d += v;
                    }
                }
                for d in dst.iter_mut() {
                    *d *= inv;
                }
            }
        }
        drop(src);
        let mut shape = self.shape().to_vec();
        shape[r - 2] = groups;
        Ok(Tensor::from_op(shape, data, Op::GroupMean { input: self.clone(), groups }))
    }

    /// Layer normalisation over the last axis with affine `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Tensor<S>, bias: &Tensor<S>, eps: S) -> Result<Tensor<S>> {
        let d = *self.shape().last().ok_or_else(|| Error::shape("layer_norm on scalar"))?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::shape(format!(
                "layer_norm width {d} vs gain {:?} bias {:?}",
                gain.shape(),
                bias.shape()
            )));
        }
        let x = self.data();
        let (g, b) = (gain.data(), bias.data());
        let rows = x.len() / d;
        let inv_d = S::one() / S::from_usize_lossy(d);
        let mut xhat = vec![S::zero(); x.len()];
        let mut inv_std = vec![S::zero(); rows];
        let mut out = vec![S::zero(); x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = kernels::sum(row) * inv_d;
            let mut var = S::zero();
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var *= inv_d;
            let is = S::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        drop((x, g, b));
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::LayerNorm { input: self.clone(), gain: gain.clone(), bias: bias.clone(), xhat, inv_std },
        ))
    }

    /// Softmax along the last axis. Masked entries (mask value `false`) come out
    /// exactly zero. The mask shape must equal the trailing axes of `self`.
    pub fn softmax_rows(&self, mask: Option<&Mask>) -> Result<Tensor<S>> {
        let n = *self.shape().last().ok_or_else(|| Error::shape("softmax on scalar"))?;
        if let Some(m) = mask {
            let r = self.rank();
            if m.shape().len() > r || self.shape()[r - m.shape().len()..] != *m.shape() {
                return Err(Error::shape(format!(
                    "mask {:?} does not match trailing axes of {:?}",
                    m.shape(),
                    self.shape()
                )));
            }
        }
        let x = self.data();
        let mut out = vec![S::zero(); x.len()];
        for r in 0..x.len() / n {
            let mrow = mask.map(|m| {
                let off = (r * n) % m.data().len();
                &m.data()[off..off + n]
            });
            if !kernels::softmax_row(&x[r * n..(r + 1) * n], mrow, &mut out[r * n..(r + 1) * n]) {
                return Err(Error::AllMaskedRow { row: r });
            }
        }
        drop(x);
        Ok(Tensor::from_op(self.shape().to_vec(), out, Op::Softmax(self.clone())))
    }

    pub fn log_softmax_rows(&self) -> Result<Tensor<S>> {
        let n = *self.shape().last().ok_or_else(|| Error::shape("log_softmax on scalar"))?;
        let x = self.data();
        let mut out = vec![S::zero(); x.len()];
        for r in 0..x.len() / n {
            kernels::log_softmax_row(&x[r * n..(r + 1) * n], &mut out[r * n..(r + 1) * n]);
        }
        drop(x);
        Ok(Tensor::from_op(self.shape().to_vec(), out, Op::LogSoftmax(self.clone())))
    }

    pub fn sum(&self) -> Tensor<S> {
        let s = kernels::sum(&self.data());
        Tensor::from_op(vec![], vec![s], Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor<S> {
        let s = kernels::sum(&self.data()) / S::from_usize_lossy(self.numel());
        Tensor::from_op(vec![], vec![s], Op::Mean(self.clone()))
    }
}

/// Mean over all elements of `(a - b)²`.
pub fn mse<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("mse of {:?} and {:?}", a.shape(), b.shape())));
    }
    let mut acc = S::zero();
    for (&x, &y) in a.data().iter().zip(b.data().iter()) {
        acc += (x - y) * (x - y);
    }
    let v = acc / S::from_usize_lossy(a.numel());
    Ok(Tensor::from_op(vec![], vec![v], Op::Mse(a.clone(), b.clone())))
}

/// Mean over masked-in rows of `-log softmax(logits)[target]`.
pub fn cross_entropy_masked<S: Scalar>(
    logits: &Tensor<S>,
    targets: &[usize],
    mask: &[bool],
) -> Result<Tensor<S>> {
    if logits.rank() != 2 {
        return Err(Error::shape(format!("cross entropy expects [T, V] logits, got {:?}", logits.shape())));
    }
    let (t, v) = (logits.shape()[0], logits.shape()[1]);
    if targets.len() != t || mask.len() != t {
        return Err(Error::shape(format!(
            "cross entropy: {t} rows, {} targets, {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    for (&id, &m) in targets.iter().zip(mask) {
        if m && id >= v {
            return Err(Error::InvalidTokenId { id, vocab: v });
        }
    }
    let x = logits.data();
    let mut probs = vec![S::zero(); t * v];
    let mut logp = vec![S::zero(); v];
    let mut total = S::zero();
    for r in 0..t {
        if !mask[r] {
            continue;
        }
        let row = &x[r * v..(r + 1) * v];
        kernels::log_softmax_row(row, &mut logp);
        total -= logp[targets[r]];
        for (p, &lp) in probs[r * v..(r + 1) * v].iter_mut().zip(&logp) {
            *p = lp.exp();
        }
    }
    drop(x);
    let value = total / S::from_usize_lossy(count);
    Ok(Tensor::from_op(
        vec![],
        vec![value],
        Op::CrossEntropy {
            logits: logits.clone(),
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            probs,
            count,
        },
    ))
}
