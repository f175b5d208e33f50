//! Named parameter sets, per-forward binding sessions and the Adam optimiser.

use std::ops::{Deref, DerefMut};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn add_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f32, rng: &mut impl Rng) -> ParamId {
        let normal = Normal::new(0.0f32, std).expect("valid std");
        self.add(name, Tensor::from_fn(shape, |_| normal.sample(rng)))
    }

    pub fn add_uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f32, rng: &mut impl Rng) -> ParamId {
        self.add(name, Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound)))
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: &[usize], value: f32) -> ParamId {
        self.add(name, Tensor::from_fn(shape, |_| value))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Copies gradients into each tensor's `grad` slot.
    pub fn set_grads(&mut self, grads: &Grads) {
        for (t, g) in self.tensors.iter_mut().zip(&grads.0) {
            t.grad = g.clone();
        }
    }

    /// Replaces parameter values from `(name, tensor)` pairs with identical shapes.
    pub fn load_values<'a>(&mut self, entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
        let mut seen = vec![false; self.len()];
        for (name, t) in entries {
            let id = self
                .id(name)
                .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
            let dst = &mut self.tensors[id.0];
            if dst.shape() != t.shape() {
                return Err(Error::Shape {
                    op: "load_values",
                    lhs: dst.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            dst.data_mut().copy_from_slice(t.data());
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Contract(format!("missing parameter {}", self.names[i])));
        }
        Ok(())
    }
}

/// Gradients aligned with the ids of one [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads(Vec<Option<Vec<f32>>>);

impl Grads {
    pub fn get(&self, id: ParamId) -> Option<&[f32]> {
        self.0[id.0].as_deref()
    }

    pub fn global_norm(&self) -> f64 {
        self.0
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the pre-clip norm.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if max_norm > 0.0 && norm > max_norm {
            let s = (max_norm / norm) as f32;
            self.0.iter_mut().flatten().flat_map(|g| g.iter_mut()).for_each(|x| *x *= s);
        }
        norm
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().flatten().all(|g| g.iter().all(|&x| x == 0.0))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|g| g.iter().all(|x| x.is_finite()))
    }
}

/// A forward pass over one parameter store. Parameters are bound to tape
/// leaves on first use. Dereferences to the underlying [`Tape`].
pub struct Session<'p> {
    tape: Tape,
    store: &'p ParamStore,
    bound: Vec<Option<Var>>,
    grad: bool,
    dropout: f32,
    rng: ChaCha8Rng,
}

impl<'p> Session<'p> {
    /// Gradient-tracking session with dropout disabled.
    pub fn new(store: &'p ParamStore) -> Self {
        Session {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            grad: true,
            dropout: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Inference-only session: parameters are bound without gradient tracking.
    pub fn inference(store: &'p ParamStore) -> Self {
        Session {
            grad: false,
            ..Session::new(store)
        }
    }

    /// Enables training-mode dropout with its own seeded mask stream.
    pub fn with_dropout(mut self, p: f32, seed: u64) -> Self {
        self.dropout = p;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn with_nan_guard(mut self, on: bool) -> Self {
        self.tape = std::mem::take(&mut self.tape).with_nan_guard(on);
        self
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.store.get(id);
        let v = if self.grad {
            self.tape.leaf(t)
        } else {
            let mut plain = t.clone();
            plain.requires_grad = false;
            self.tape.leaf(&plain)
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Applies the session's dropout rate (identity when disabled).
    pub fn drop(&mut self, x: Var) -> Result<Var> {
        let p = self.dropout;
        self.tape.dropout(x, p, &mut self.rng)
    }

    /// Runs the reverse pass and gathers parameter gradients. Parameters the
    /// loss does not depend on receive zero gradients.
    pub fn backward(mut self, loss: Var) -> Result<Grads> {
        self.tape.backward(loss)?;
        let grads = self
            .store
            .ids()
            .map(|id| {
                let n = self.store.get(id).numel();
                let g = self.bound[id.0].and_then(|v| self.tape.grad(v)).map(<[f32]>::to_vec);
                Some(g.unwrap_or_else(|| vec![0.0; n]))
            })
            .collect();
        Ok(Grads(grads))
    }
}

impl Deref for Session<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Session<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f32>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }

    /// Moment buffers as named tensors, for checkpointing.
    pub fn state(&self, store: &ParamStore, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * store.len() + 1);
        for (i, (name, t)) in store.iter().enumerate() {
            let shape = t.shape();
            out.push((format!("{prefix}.m.{name}"), Tensor::new(shape.to_vec(), self.m[i].clone()).expect("shape")));
            out.push((format!("{prefix}.v.{name}"), Tensor::new(shape.to_vec(), self.v[i].clone()).expect("shape")));
        }
        out.push((format!("{prefix}.step"), Tensor::scalar(self.step as f32)));
        out
    }

    pub fn load_state(&mut self, store: &ParamStore, prefix: &str, lookup: impl Fn(&str) -> Option<Tensor>) -> Result<()> {
        let missing = |n: &str| Error::Contract(format!("checkpoint lacks optimiser entry {n}"));
        for (i, (name, _)) in store.iter().enumerate() {
            let mk = format!("{prefix}.m.{name}");
            let vk = format!("{prefix}.v.{name}");
            self.m[i] = lookup(&mk).ok_or_else(|| missing(&mk))?.into_data();
            self.v[i] = lookup(&vk).ok_or_else(|| missing(&vk))?.into_data();
        }
        let sk = format!("{prefix}.step");
        self.step = lookup(&sk).ok_or_else(|| missing(&sk))?.data()[0] as u64;
        Ok(())
    }
}
