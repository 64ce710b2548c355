//! Neural building blocks: the autodiff graph, parameter registry with Adam
//! and EMA updates, and the concrete networks (denoiser U-Net, segmentation
//! encoder-decoder, random-projection feature embedder).

pub mod embed;
pub mod graph;
pub mod segnet;
pub mod unet;

use graph::{NodeId, Tensor};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// An ordered set of named parameter tensors. Order is the contract: forward
/// passes consume parameters in construction order via `ParamCursor`, and
/// checkpoints store them in the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn push(&mut self, name: &str, value: Tensor) {
        self.entries.push((name.to_string(), value));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// L2 norm of the difference between two aligned sets.
    pub fn distance(&self, other: &ParamSet) -> f64 {
        let mut acc = 0.0f64;
        for ((_, a), (_, b)) in self.entries.iter().zip(&other.entries) {
            for (&x, &y) in a.data.iter().zip(&b.data) {
                acc += ((x - y) as f64).powi(2);
            }
        }
        acc.sqrt()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Sequential reader over pre-created parameter leaf ids; forward passes
/// consume them in construction order.
pub struct IdCursor<'a> {
    ids: &'a [NodeId],
    index: usize,
}

impl<'a> IdCursor<'a> {
    pub fn new(ids: &'a [NodeId]) -> Self {
        IdCursor { ids, index: 0 }
    }

    pub fn next(&mut self) -> NodeId {
        let id = self.ids[self.index];
        self.index += 1;
        id
    }

    pub fn finished(&self) -> bool {
        self.index == self.ids.len()
    }
}

/// Adam optimizer over a `ParamSet`; state is aligned with entry order.
pub struct Adam {
    pub lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32, params: &ParamSet) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.entries.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            v: params.entries.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
        }
    }

    /// One update; `grads[i]` must align with `params.entries[i]` (missing
    /// gradients are treated as zero and skipped).
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Vec<f32>>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, (_, p)) in params.entries.iter_mut().enumerate() {
            let Some(g) = grads[i].as_ref() else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.data.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p.data[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// theta_ema <- decay*theta_ema + (1-decay)*theta, elementwise.
pub fn ema_update(ema: &mut ParamSet, params: &ParamSet, decay: f32) {
    for ((_, e), (_, p)) in ema.entries.iter_mut().zip(&params.entries) {
        for (ev, &pv) in e.data.iter_mut().zip(&p.data) {
            *ev = decay * *ev + (1.0 - decay) * pv;
        }
    }
}

/// He-style normal init: std = sqrt(2 / fan_in).
pub fn he_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize, fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f32).sqrt();
    let dist = rand_distr::Normal::new(0.0f32, std).unwrap();
    let data = (0..n * c * h * w).map(|_| dist.sample(rng)).collect();
    Tensor::from_vec(n, c, h, w, data).unwrap()
}
