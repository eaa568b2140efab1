//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap reference-counted handle. Every operation on tensors
//! that track gradients records a node holding its inputs and the data its
//! backward rule needs; [`Tensor::backward`] walks that graph once in reverse
//! topological order and accumulates gradients into the leaves. Graphs are
//! released as soon as the last handle to their root is dropped.
//!
//! Reductions always run sequentially in ascending index order so results are
//! bitwise reproducible.

mod backward;
mod gradcheck;
pub(crate) mod kernels;
pub mod ops;

use std::cell::{Ref, RefCell, RefMut};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport};
pub(crate) use backward::Op;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

pub(crate) struct Node<S: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<S>>,
    grad: RefCell<Option<Vec<S>>>,
    requires_grad: bool,
    op: Option<Op<S>>,
}

/// Dense n-dimensional array, optionally tracking gradients.
pub struct Tensor<S: Scalar>(Rc<Node<S>>);

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let preview: Vec<_> = data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data", &preview)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Tensor<S> {
    fn from_parts(shape: Vec<usize>, data: Vec<S>, requires_grad: bool, op: Option<Op<S>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            op,
        }))
    }

    /// Result of an operation: records `op` only when some input tracks gradients.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<S>, op: Op<S>) -> Self {
        if op.inputs().iter().any(|t| t.requires_grad()) {
            Self::from_parts(shape, data, true, Some(op))
        } else {
            Self::from_parts(shape, data, false, None)
        }
    }

    /// Constant leaf (no gradient tracking).
    pub fn from_vec(data: Vec<S>, shape: &[usize]) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {} values, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Self::from_parts(shape.to_vec(), data, false, None))
    }

    /// Trainable leaf: gradients accumulate into it on every backward pass.
    pub fn param(data: Vec<S>, shape: &[usize]) -> Result<Self> {
        let t = Self::from_vec(data, shape)?;
        Ok(t.detach_with_grad(true))
    }

    pub fn scalar(x: S) -> Self {
        Self::from_parts(vec![], vec![x], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(shape.to_vec(), vec![S::zero(); numel(shape)], false, None)
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; numel(shape)], false, None)
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(data.iter().map(|&x| S::from_f64_lossy(x)).collect(), shape)
    }

    /// Gaussian samples with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                S::from_f64_lossy(z * std)
            })
            .collect();
        Self::from_parts(shape.to_vec(), data, false, None)
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| S::from_f64_lossy(rng.random_range(lo..hi)))
            .collect();
        Self::from_parts(shape.to_vec(), data, false, None)
    }

    /// Same data as a new leaf, cut off from any graph.
    pub fn detach(&self) -> Self {
        self.detach_with_grad(false)
    }

    fn detach_with_grad(&self, requires_grad: bool) -> Self {
        Self::from_parts(self.shape().to_vec(), self.data().clone(), requires_grad, None)
    }

    /// Copy of this tensor as a trainable leaf.
    pub fn to_param(&self) -> Self {
        self.detach_with_grad(true)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    pub(crate) fn id(&self) -> u64 {
        self.0.id
    }

    pub(crate) fn op(&self) -> Option<&Op<S>> {
        self.0.op.as_ref()
    }

    pub fn data(&self) -> Ref<'_, Vec<S>> {
        self.0.data.borrow()
    }

    /// Mutable access to the values, for optimizers and test fixtures.
    ///
    /// Mutating a tensor that is an input of a live graph invalidates that
    /// graph's saved state; only mutate leaves between forward passes.
    pub fn data_mut(&self) -> RefMut<'_, Vec<S>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.data().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data().iter().map(|x| x.to_f64_lossy()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> S {
        let d = self.data();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.shape());
        d[0]
    }

    pub fn get(&self, index: &[usize]) -> S {
        assert_eq!(index.len(), self.rank());
        let mut off = 0;
        for (&i, &d) in index.iter().zip(self.shape()) {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape());
            off = off * d + i;
        }
        self.data()[off]
    }

    /// Accumulated gradient, if any backward pass reached this leaf.
    pub fn grad(&self) -> Option<Vec<S>> {
        self.0.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<S>>> {
        self.0.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[S]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &x) in acc.iter_mut().zip(g) {
                    *a += x;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Elementwise bit-equality of values and shapes.
    pub fn bit_eq(&self, other: &Tensor<S>) -> bool {
        self.shape() == other.shape()
            && self
                .data()
                .iter()
                .zip(other.data().iter())
                .all(|(a, b)| a.to_f64_lossy().to_bits() == b.to_f64_lossy().to_bits())
    }

    /// Copy into another precision; the result is a constant leaf.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data().iter().map(|x| T::from_f64_lossy(x.to_f64_lossy())).collect();
        Tensor::from_parts(self.shape().to_vec(), data, false, None)
    }
}

/// Boolean mask broadcast against the trailing dimensions of a tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(data: Vec<bool>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() || shape.is_empty() {
            return Err(Error::shape(format!("mask shape {shape:?} vs {} entries", data.len())));
        }
        Ok(Mask { shape: shape.to_vec(), data })
    }

    /// Lower-triangular `[n, n]` mask: entry `(i, j)` is visible iff `j <= i`.
    pub fn causal(n: usize) -> Self {
        let data = (0..n).flat_map(|i| (0..n).map(move |j| j <= i)).collect();
        Mask { shape: vec![n, n], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }
}

#[cfg(test)]
mod tests;
