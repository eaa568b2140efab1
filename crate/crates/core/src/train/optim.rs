use std::collections::BTreeMap;

use crate::checkpoint::Checkpoint;
use crate::error::Result;
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

/// Learning-rate group of a trainable tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum LrGroup {
    /// Vision projector and distillation projectors.
    Projector,
    Other,
}

struct Slot<S: Scalar> {
    name: String,
    param: Tensor<S>,
    group: LrGroup,
    m: Vec<S>,
    v: Vec<S>,
}

/// Adam with decoupled weight decay. Projector parameters never decay.
pub struct AdamW<S: Scalar> {
    slots: Vec<Slot<S>>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Updates applied so far.
    pub t: u64,
    /// Rate each group received in the most recent update.
    pub last_lr: BTreeMap<LrGroup, f64>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(params: Vec<(String, Tensor<S>, LrGroup)>, weight_decay: f64) -> Self {
        let slots = params
            .into_iter()
            .map(|(name, param, group)| {
                let n = param.numel();
                Slot { name, param, group, m: vec![S::zero(); n], v: vec![S::zero(); n] }
            })
            .collect();
        AdamW { slots, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, last_lr: BTreeMap::new() }
    }

    pub fn zero_grad(&self) {
        self.slots.iter().for_each(|s| s.param.zero_grad());
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<S>, LrGroup)> {
        self.slots.iter().map(|s| (s.name.as_str(), &s.param, s.group))
    }

    /// One update from the accumulated gradients. Parameters without a gradient
    /// are left untouched, including their moment estimates.
    pub fn step(&mut self, lr: impl Fn(LrGroup) -> f64) {
        self.t += 1;
        let (b1, b2): (S, S) = (c(self.beta1), c(self.beta2));
        let bc1: S = c(1.0 - self.beta1.powi(self.t as i32));
        let bc2: S = c(1.0 - self.beta2.powi(self.t as i32));
        let eps: S = c(self.eps);
        self.last_lr.clear();
        for slot in &mut self.slots {
            let rate = lr(slot.group);
            self.last_lr.insert(slot.group, rate);
            let grad = slot.param.grad_ref();
            let Some(g) = grad.as_ref() else { continue };
            let lr_s: S = c(rate);
            let wd: S = if slot.group == LrGroup::Projector { S::zero() } else { c(self.weight_decay) };
            let mut p = slot.param.data_mut();
            for i in 0..p.len() {
                slot.m[i] = b1 * slot.m[i] + (S::one() - b1) * g[i];
                slot.v[i] = b2 * slot.v[i] + (S::one() - b2) * g[i] * g[i];
                let mhat = slot.m[i] / bc1;
                let vhat = slot.v[i] / bc2;
                let decay = wd * p[i];
                p[i] -= lr_s * (mhat / (vhat.sqrt() + eps) + decay);
            }
        }
    }

    pub fn save_into(&self, ck: &mut Checkpoint) {
        ck.set("adam_t", self.t);
        for s in &self.slots {
            let shape = s.param.shape();
            let m = Tensor::from_vec(s.m.clone(), shape).expect("same shape");
            let v = Tensor::from_vec(s.v.clone(), shape).expect("same shape");
            ck.push(format!("adam.m.{}", s.name), &m);
            ck.push(format!("adam.v.{}", s.name), &v);
        }
    }

    pub fn load_from(&mut self, ck: &Checkpoint) -> Result<()> {
        self.t = ck.require("adam_t")?;
        for s in &mut self.slots {
            let shape = s.param.shape().to_vec();
            s.m = ck.load_shaped::<S>(&format!("adam.m.{}", s.name), &shape)?.to_vec();
            s.v = ck.load_shaped::<S>(&format!("adam.v.{}", s.name), &shape)?.to_vec();
        }
        Ok(())
    }
}
