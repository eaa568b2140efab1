//! Plain slice kernels shared by forward and backward rules.
//!
//! Every reduction walks its index range in ascending order.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `c[m, n] += a[m, k] · b[k, n]`
pub(crate) fn gemm_nn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

/// `c[k, n] += a[m, k]ᵀ · b[m, n]`
pub(crate) fn gemm_tn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

/// `c[m, n] += a[m, k] · b[n, k]ᵀ`
pub(crate) fn gemm_nt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    let bt = transpose2(b, n, k);
    gemm_nn(a, &bt, c, m, k, n);
}

/// Transpose of a row-major `[rows, cols]` matrix.
pub(crate) fn transpose2<S: Scalar>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Trailing-dimension broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// For every element of `out_shape`, the flat offset of the broadcast source
/// element in `in_shape`. `None` when the shapes are equal (identity map).
pub(crate) fn broadcast_index(in_shape: &[usize], out_shape: &[usize]) -> Option<Vec<usize>> {
    if in_shape == out_shape {
        return None;
    }
    let n_out: usize = out_shape.iter().product();
    let n_in: usize = in_shape.iter().product();
    if n_in == 1 {
        return Some(vec![0; n_out]);
    }
    // Suffix case: the input repeats over the leading output dimensions.
    let off = out_shape.len() - in_shape.len();
    if out_shape[off..] == *in_shape {
        return Some((0..n_out).map(|o| o % n_in).collect());
    }
    let in_strides = strides(in_shape);
    let rank = out_shape.len();
    let mut eff = vec![0usize; rank];
    for i in 0..in_shape.len() {
        if in_shape[i] != 1 {
            eff[off + i] = in_strides[i];
        }
    }
    let mut map = Vec::with_capacity(n_out);
    let mut idx = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..n_out {
        map.push(cur);
        for d in (0..rank).rev() {
            idx[d] += 1;
            cur += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            cur -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    Some(map)
}

/// Data of `x` (shape `shape`) permuted so that output axis `i` is input axis `axes[i]`.
pub(crate) fn permute<S: Scalar>(x: &[S], shape: &[usize], axes: &[usize]) -> Vec<S> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let eff: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.len());
    if x.is_empty() {
        return out;
    }
    let mut idx = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..x.len() {
        out.push(x[cur]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            cur += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            cur -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}

/// Sequential ascending sum.
#[inline]
pub(crate) fn sum<S: Scalar>(x: &[S]) -> S {
    let mut acc = S::zero();
    for &v in x {
        acc += v;
    }
    acc
}

#[inline]
pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Numerically stable softmax of one row, honouring an optional visibility mask.
/// Returns false when every entry is masked.
pub(crate) fn softmax_row<S: Scalar>(x: &[S], mask: Option<&[bool]>, out: &mut [S]) -> bool {
    let visible = |j: usize| mask.is_none_or(|m| m[j]);
    let mut max = S::neg_infinity();
    let mut any = false;
    for (j, &v) in x.iter().enumerate() {
        if visible(j) {
            any = true;
            if v > max {
                max = v;
            }
        }
    }
    if !any {
        return false;
    }
    let mut total = S::zero();
    for (j, (o, &v)) in out.iter_mut().zip(x).enumerate() {
        if visible(j) {
            *o = (v - max).exp();
            total += *o;
        } else {
            *o = S::zero();
        }
    }
    let inv = S::one() / total;
    for o in out.iter_mut() {
        *o *= inv;
    }
    true
}

/// `log softmax` of one row.
pub(crate) fn log_softmax_row<S: Scalar>(x: &[S], out: &mut [S]) {
    let mut max = S::neg_infinity();
    for &v in x {
        if v > max {
            max = v;
        }
    }
    let mut total = S::zero();
    for &v in x {
        total += (v - max).exp();
    }
    let lse = max + total.ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}
