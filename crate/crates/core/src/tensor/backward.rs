use std::collections::{HashMap, HashSet};

use super::kernels::{self, broadcast_index};
use super::ops::{gelu_deriv, matmul_plan};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A recorded operation together with whatever its backward rule needs.
pub(crate) enum Op<S: Scalar> {
    Add(Tensor<S>, Tensor<S>),
    Sub(Tensor<S>, Tensor<S>),
    Mul(Tensor<S>, Tensor<S>),
    Scale(Tensor<S>, S),
    AddScalar(Tensor<S>),
    Exp(Tensor<S>),
    Log(Tensor<S>),
    Map { input: Tensor<S>, deriv: fn(S) -> S },
    Gelu(Tensor<S>),
    MatMul(Tensor<S>, Tensor<S>),
    Permute { input: Tensor<S>, axes: Vec<usize> },
    Reshape(Tensor<S>),
    Concat { parts: Vec<Tensor<S>>, axis: usize },
    IndexSelect { input: Tensor<S>, axis: usize, indices: Vec<usize> },
    GroupMean { input: Tensor<S>, groups: usize },
    LayerNorm { input: Tensor<S>, gain: Tensor<S>, bias: Tensor<S>, xhat: Vec<S>, inv_std: Vec<S> },
    Softmax(Tensor<S>),
    LogSoftmax(Tensor<S>),
    Sum(Tensor<S>),
    Mean(Tensor<S>),
    Mse(Tensor<S>, Tensor<S>),
    CrossEntropy { logits: Tensor<S>, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<S>, count: usize },
}

/// Sum `g` (laid out as `out_shape`) back onto a broadcast input of length `len`.
fn unbroadcast<S: Scalar>(g: &[S], map: &Option<Vec<usize>>, len: usize) -> Vec<S> {
    match map {
        None => g.to_vec(),
        Some(m) => {
            let mut out = vec![S::zero(); len];
            for (&gi, &i) in g.iter().zip(m) {
                out[i] += gi;
            }
            out
        }
    }
}

impl<S: Scalar> Op<S> {
    pub(crate) fn inputs(&self) -> Vec<&Tensor<S>> {
        use Op::*;
        match self {
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | Mse(a, b) => vec![a, b],
            Scale(a, _) | AddScalar(a) | Exp(a) | Log(a) | Gelu(a) | Reshape(a) | Softmax(a)
            | LogSoftmax(a) | Sum(a) | Mean(a) => vec![a],
            Map { input, .. }
            | Permute { input, .. }
            | IndexSelect { input, .. }
            | GroupMean { input, .. } => vec![input],
            Concat { parts, .. } => parts.iter().collect(),
            LayerNorm { input, gain, bias, .. } => vec![input, gain, bias],
            CrossEntropy { logits, .. } => vec![logits],
        }
    }

    /// Gradients for each entry of [`Op::inputs`], given the output and its gradient.
    fn backward(&self, out: &Tensor<S>, g: &[S]) -> Vec<Option<Vec<S>>> {
        use Op::*;
        let out_shape = out.shape();
        match self {
            Add(a, b) | Sub(a, b) => {
                let ga = a.requires_grad().then(|| {
                    unbroadcast(g, &broadcast_index(a.shape(), out_shape), a.numel())
                });
                let gb = b.requires_grad().then(|| {
                    let mut gb = unbroadcast(g, &broadcast_index(b.shape(), out_shape), b.numel());
                    if matches!(self, Sub(..)) {
                        gb.iter_mut().for_each(|x| *x = -*x);
                    }
                    gb
                });
                vec![ga, gb]
            }
            Mul(a, b) => {
                let ma = broadcast_index(a.shape(), out_shape);
                let mb = broadcast_index(b.shape(), out_shape);
                let (ad, bd) = (a.data(), b.data());
                let at = |o: usize| ma.as_ref().map_or(o, |m| m[o]);
                let bt = |o: usize| mb.as_ref().map_or(o, |m| m[o]);
                let ga = a.requires_grad().then(|| {
                    let mut ga = vec![S::zero(); a.numel()];
                    for (o, &gi) in g.iter().enumerate() {
                        ga[at(o)] += gi * bd[bt(o)];
                    }
                    ga
                });
                let gb = b.requires_grad().then(|| {
                    let mut gb = vec![S::zero(); b.numel()];
                    for (o, &gi) in g.iter().enumerate() {
                        gb[bt(o)] += gi * ad[at(o)];
                    }
                    gb
                });
                vec![ga, gb]
            }
            Scale(_, f) => vec![Some(g.iter().map(|&x| x * *f).collect())],
            AddScalar(_) | Reshape(_) => vec![Some(g.to_vec())],
            Exp(_) => {
                let y = out.data();
                vec![Some(g.iter().zip(y.iter()).map(|(&gi, &yi)| gi * yi).collect())]
            }
            Log(a) => {
                let x = a.data();
                vec![Some(g.iter().zip(x.iter()).map(|(&gi, &xi)| gi / xi).collect())]
            }
            Map { input, deriv } => {
                let x = input.data();
                vec![Some(g.iter().zip(x.iter()).map(|(&gi, &xi)| gi * deriv(xi)).collect())]
            }
            Gelu(a) => {
                let x = a.data();
                vec![Some(g.iter().zip(x.iter()).map(|(&gi, &xi)| gi * gelu_deriv(xi)).collect())]
            }
            MatMul(a, b) => matmul_backward(a, b, g),
            Permute { input, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                let _ = input;
                vec![Some(kernels::permute(g, out_shape, &inv))]
            }
            Concat { parts, axis } => {
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis] * inner;
                let mut offset = 0;
                parts
                    .iter()
                    .map(|p| {
                        let len = p.shape()[*axis] * inner;
                        let res = p.requires_grad().then(|| {
                            let mut gp = Vec::with_capacity(p.numel());
                            for o in 0..outer {
                                let start = o * total + offset;
                                gp.extend_from_slice(&g[start..start + len]);
                            }
                            gp
                        });
                        offset += len;
                        res
                    })
                    .collect()
            }
            IndexSelect { input, axis, indices } => {
                let len = input.shape()[*axis];
                let outer: usize = input.shape()[..*axis].iter().product();
                let inner: usize = input.shape()[axis + 1..].iter().product();
                let mut gi = vec![S::zero(); input.numel()];
                let mut src = 0;
                for o in 0..outer {
                    for &i in indices {
                        let dst = (o * len + i) * inner;
                        for (d, &v) in gi[dst..dst + inner].iter_mut().zip(&g[src..src + inner]) {
                            *d += v;
                        }
                        src += inner;
                    }
                }
                vec![Some(gi)]
            }
            GroupMean { input, groups } => {
                let r = input.rank();
                let rows = input.shape()[r - 2];
                let width = input.shape()[r - 1];
                let size = rows / groups;
                let outer = input.numel() / (rows * width);
                let inv = S::one() / S::from_usize_lossy(size);
                let mut gi = vec![S::zero(); input.numel()];
                for o in 0..outer {
                    for row in 0..rows {
                        let grp = row / size;
                        let src = &g[(o * groups + grp) * width..(o * groups + grp + 1) * width];
                        let dst = &mut gi[(o * rows + row) * width..(o * rows + row + 1) * width];
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d = v * inv;
                        }
                    }
                }
                vec![Some(gi)]
            }
            LayerNorm { input, gain, bias, xhat, inv_std } => {
                let d = gain.numel();
                let rows = xhat.len() / d;
                let gd = gain.data();
                let inv_d = S::one() / S::from_usize_lossy(d);
                let gx = input.requires_grad().then(|| {
                    let mut gx = vec![S::zero(); xhat.len()];
                    let mut dxhat = vec![S::zero(); d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = gr[j] * gd[j];
                        }
                        let m1 = kernels::sum(&dxhat) * inv_d;
                        let m2 = kernels::dot(&dxhat, hr) * inv_d;
                        for j in 0..d {
                            gx[r * d + j] = inv_std[r] * (dxhat[j] - m1 - hr[j] * m2);
                        }
                    }
                    gx
                });
                let gg = gain.requires_grad().then(|| {
                    let mut gg = vec![S::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    gg
                });
                let gb = bias.requires_grad().then(|| {
                    let mut gb = vec![S::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                    gb
                });
                vec![gx, gg, gb]
            }
            Softmax(_) => {
                let n = *out_shape.last().unwrap();
                let y = out.data();
                let mut gx = vec![S::zero(); y.len()];
                for r in 0..y.len() / n {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let s = kernels::dot(gr, yr);
                    for j in 0..n {
                        gx[r * n + j] = yr[j] * (gr[j] - s);
                    }
                }
                vec![Some(gx)]
            }
            LogSoftmax(_) => {
                let n = *out_shape.last().unwrap();
                let y = out.data();
                let mut gx = vec![S::zero(); y.len()];
                for r in 0..y.len() / n {
                    let gr = &g[r * n..(r + 1) * n];
                    let s = kernels::sum(gr);
                    for j in 0..n {
                        gx[r * n + j] = gr[j] - y[r * n + j].exp() * s;
                    }
                }
                vec![Some(gx)]
            }
            Sum(a) => vec![Some(vec![g[0]; a.numel()])],
            Mean(a) => {
                let v = g[0] / S::from_usize_lossy(a.numel());
                vec![Some(vec![v; a.numel()])]
            }
            Mse(a, b) => {
                let n = S::from_usize_lossy(a.numel());
                let two = S::one() + S::one();
                let (ad, bd) = (a.data(), b.data());
                let diff: Vec<S> =
                    ad.iter().zip(bd.iter()).map(|(&x, &y)| two * (x - y) / n * g[0]).collect();
                let gb = b.requires_grad().then(|| diff.iter().map(|&x| -x).collect());
                let ga = a.requires_grad().then_some(diff);
                vec![ga, gb]
            }
            CrossEntropy { logits, targets, mask, probs, count } => {
                let v = logits.shape()[1];
                let scale = g[0] / S::from_usize_lossy(*count);
                let mut gx = vec![S::zero(); probs.len()];
                for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                    if !m {
                        continue;
                    }
                    for j in 0..v {
                        gx[r * v + j] = probs[r * v + j] * scale;
                    }
                    gx[r * v + t] -= scale;
                }
                vec![Some(gx)]
            }
        }
    }
}

fn matmul_backward<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, g: &[S]) -> Vec<Option<Vec<S>>> {
    let plan = matmul_plan(a.shape(), b.shape()).expect("shapes validated in forward");
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let (ad, bd) = (a.data(), b.data());
    let mut ga = a.requires_grad().then(|| vec![S::zero(); a.numel()]);
    let mut gb = b.requires_grad().then(|| vec![S::zero(); b.numel()]);
    if plan.flat {
        let rows = ad.len() / k;
        if let Some(ga) = ga.as_mut() {
            kernels::gemm_nt(g, &bd, ga, rows, n, k);
        }
        if let Some(gb) = gb.as_mut() {
            kernels::gemm_tn(&ad, g, gb, rows, k, n);
        }
    } else {
        let bt = ga.is_some().then(|| {
            let nb = bd.len() / (k * n);
            (0..nb)
                .flat_map(|i| kernels::transpose2(&bd[i * k * n..(i + 1) * k * n], k, n))
                .collect::<Vec<_>>()
        });
        for (ob, (&ia, &ib)) in plan.a_batch.iter().zip(&plan.b_batch).enumerate() {
            let gblk = &g[ob * m * n..(ob + 1) * m * n];
            if let (Some(ga), Some(bt)) = (ga.as_mut(), bt.as_ref()) {
                kernels::gemm_nn(gblk, &bt[ib * k * n..(ib + 1) * k * n], &mut ga[ia * m * k..(ia + 1) * m * k], m, n, k);
            }
            if let Some(gb) = gb.as_mut() {
                kernels::gemm_tn(&ad[ia * m * k..(ia + 1) * m * k], gblk, &mut gb[ib * k * n..(ib + 1) * k * n], m, k, n);
            }
        }
    }
    vec![ga, gb]
}

impl<S: Scalar> Tensor<S> {
    /// Reverse-mode sweep from this scalar, accumulating into every reachable
    /// leaf that requires gradients. Repeated calls accumulate.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarRoot(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = topological_order(self);
        let mut grads: HashMap<u64, Vec<S>> = HashMap::new();
        grads.insert(self.id(), vec![S::one()]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else { continue };
            let Some(op) = node.op() else {
                node.accumulate_grad(&g);
                continue;
            };
            for (input, gi) in op.inputs().into_iter().zip(op.backward(node, &g)) {
                let Some(gi) = gi else { continue };
                if !input.requires_grad() {
                    continue;
                }
                match grads.get_mut(&input.id()) {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, &x)| *a += x),
                    None => {
                        grads.insert(input.id(), gi);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Post-order over gradient-tracking nodes reachable from `root`.
fn topological_order<S: Scalar>(root: &Tensor<S>) -> Vec<Tensor<S>> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(op) = t.op() {
            for input in op.inputs().into_iter().rev() {
                if input.requires_grad() && !visited.contains(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }
    order
}
