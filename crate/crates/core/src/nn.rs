//! Parameter storage, layer handles and the optimizer.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Mat, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Mat,
    /// Non-trainable parameters are bound as constants and skipped by the optimizer.
    pub trainable: bool,
}

/// Flat, ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Parameters bound into a graph, indexed like the store.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, id: usize) -> Var {
        self.vars[id]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat, trainable: bool) -> usize {
        let name = name.into();
        debug_assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            value,
            trainable,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn value(&self, id: usize) -> &Mat {
        &self.params[id].value
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Mat {
        &mut self.params[id].value
    }

    pub fn name(&self, id: usize) -> &str {
        &self.params[id].name
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Bind every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if p.trainable {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Check that `other` has the same names, shapes and trainability.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Config(format!(
                "parameter count mismatch: {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.value.dim() != b.value.dim() {
                return Err(Error::Config(format!(
                    "parameter mismatch: {} {:?} vs {} {:?}",
                    a.name,
                    a.value.dim(),
                    b.name,
                    b.value.dim()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), randn((fan_in, fan_out), std, rng), trainable);
        let b = store.add(format!("{name}.bias"), Array2::zeros((1, fan_out)), trainable);
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let y = g.matmul(x, p.get(self.w));
        g.add_row(y, p.get(self.b))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: usize,
    pub beta: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Array2::ones((1, dim)), true);
        let beta = store.add(format!("{name}.beta"), Array2::zeros((1, dim)), true);
        LayerNorm { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.layer_norm(x, p.get(self.gamma), p.get(self.beta), 1e-6)
    }
}

/// Gaussian init clipped at two standard deviations.
pub fn randn<R: Rng>(shape: (usize, usize), std: f64, rng: &mut R) -> Mat {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Array2::from_shape_simple_fn(shape, || {
        let mut z: f64 = normal.sample(rng);
        while z.abs() > 2.0 {
            z = normal.sample(rng);
        }
        z * std
    })
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros = |p: &Param| Array2::zeros(p.value.dim());
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: store.params.iter().map(zeros).collect(),
            v: store.params.iter().map(zeros).collect(),
        }
    }

    /// One update of every trainable parameter that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore, bound: &Bound, grads: &Gradients, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in store.params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let Some(grad) = grads.get(bound.get(i)) else {
                continue;
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|w, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *w);
                });
        }
    }
}

/// Linear warmup followed by cosine decay to zero.
pub fn cosine_lr(base: f64, step: u64, warmup: u64, total: u64) -> f64 {
    if warmup > 0 && step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_reduces_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Array2::from_elem((1, 3), 5.0), true);
        let mut opt = Adam::new(&store, 0.0);
        for _ in 0..500 {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let x = p.get(id);
            let sq = g.mul(x, x);
            let loss = g.sum(sq);
            let grads = g.backward(loss);
            opt.step(&mut store, &p, &grads, 0.05);
        }
        assert!(store.value(id).iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn frozen_params_are_untouched() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(&mut store, "l", 3, 2, 0.1, false, &mut rng);
        let before = store.clone();
        let mut opt = Adam::new(&store, 0.0);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.param(Array2::ones((1, 3)));
        let y = lin.forward(&mut g, &p, x);
        let loss = g.sum(y);
        let grads = g.backward(loss);
        opt.step(&mut store, &p, &grads, 0.1);
        assert_eq!(store, before);
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        assert!((cosine_lr(1.0, 0, 10, 100) - 0.1).abs() < 1e-12);
        assert!((cosine_lr(1.0, 9, 10, 100) - 1.0).abs() < 1e-12);
        assert!((cosine_lr(1.0, 10, 10, 100) - 1.0).abs() < 1e-12);
        assert!(cosine_lr(1.0, 100, 10, 100).abs() < 1e-12);
        assert!(cosine_lr(1.0, 55, 10, 100) < cosine_lr(1.0, 30, 10, 100));
    }
}
