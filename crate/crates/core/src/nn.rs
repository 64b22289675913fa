//! Parameter storage, the handful of layers the models share, and Adam.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::graph::{Grads, Graph, NodeId};
use crate::rng;
use crate::tensor::{Mat, Real};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Mat<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Mat<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total scalar count. Each stored tensor is counted once, so tied
    /// weights are not double counted.
    pub fn count(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    pub fn count_where(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.iter().filter(|(n, _)| pred(n)).map(|(_, m)| m.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), values: self.values.iter().map(Mat::cast).collect() }
    }

    /// Replaces every value from `other`, which must have identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.names != other.names {
            return Err(shape_err("parameter names differ"));
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.shape() != src.shape() {
                return Err(shape_err("parameter shapes differ"));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    pub fn zero_all(&mut self) {
        for v in &mut self.values {
            v.data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
    }
}

/// Fully connected layer `x @ w + b` with `w: [in, out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    /// Weights and bias drawn from `U(-1/sqrt(in), 1/sqrt(in))`.
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, inp: usize, out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inp.max(1) as f64).sqrt();
        let w = store.add(format!("{name}.weight"), rng::uniform_mat(rng, inp, out, bound));
        let b = bias.then(|| store.add(format!("{name}.bias"), rng::uniform_mat(rng, 1, out, bound)));
        Linear { w, b, inp, out }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn param_count(&self) -> usize {
        self.inp * self.out + if self.b.is_some() { self.out } else { 0 }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Mat::filled(1, dim, T::one()));
        let beta = store.add(format!("{name}.beta"), Mat::zeros(1, dim));
        LayerNorm { gamma, beta }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gm, bt)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, beta1: f64) -> Self {
        AdamConfig { lr, beta1, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam over a fixed subset of a store's parameters.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    params: Vec<ParamId>,
    step: i32,
    m: HashMap<ParamId, Vec<T>>,
    v: HashMap<ParamId, Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig, params: Vec<ParamId>) -> Self {
        Adam { cfg, params, step: 0, m: HashMap::new(), v: HashMap::new() }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>) {
        self.step += 1;
        let c = self.cfg;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        let lr_t = T::of(c.lr * bc2.sqrt() / bc1);
        let eps = T::of(c.eps * bc2.sqrt());
        let one = T::one();
        for &id in &self.params {
            let Some(g) = grads.param(id) else { continue };
            let n = g.len();
            let m = self.m.entry(id).or_insert_with(|| vec![T::zero(); n]);
            let v = self.v.entry(id).or_insert_with(|| vec![T::zero(); n]);
            let w = store.get_mut(id).data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                w[i] -= lr_t * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}
