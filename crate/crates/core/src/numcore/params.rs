use std::collections::HashMap;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use super::tape::{Gradients, Tape, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    tensors: IndexMap<String, Tensor<T>>,
}

/// Tape handles for the parameters bound into one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::usage(format!("parameter `{name}` not bound")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn merge(&mut self, other: Bound) {
        self.vars.extend(other.vars);
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::usage(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::usage(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn extend(&mut self, other: ParamStore<T>) {
        self.tensors.extend(other.tensors);
    }

    /// Sub-store of entries whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Pushes every tensor on the tape. Names accepted by `trainable` become
    /// gradient leaves; the rest are constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Result<Bound> {
        let mut vars = HashMap::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let v = if trainable(name) {
                tape.param(t.clone())?
            } else {
                tape.constant(t.clone())?
            };
            vars.insert(name.clone(), v);
        }
        Ok(Bound { vars })
    }

    /// Moves gradients of bound trainable leaves into the tensors' `grad`
    /// buffers, adding to any gradient already present.
    pub fn accumulate_grads(&mut self, bound: &Bound, grads: &mut Gradients<T>) -> Result<()> {
        for (name, t) in self.tensors.iter_mut() {
            let Some(&v) = bound.vars.get(name) else {
                continue;
            };
            let Some(g) = grads.take(v) else {
                continue;
            };
            let g = g.reshape(t.shape().to_vec())?.into_data();
            t.requires_grad = true;
            match &mut t.grad {
                Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                None => t.grad = Some(g),
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(|t| t.grad = None);
    }

    /// Plain SGD over every tensor flagged `requires_grad`.
    pub fn sgd_step(&mut self, lr: f64) -> Result<()> {
        sgd_step(self.tensors.values_mut(), lr)
    }

    /// SHA-256 over names, shapes, and raw value bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// `p ← p − lr·grad(p)` for every tensor that requires a gradient, then
/// clears the gradients. A trainable tensor without a gradient is an error.
pub fn sgd_step<'a, T: Real>(params: impl IntoIterator<Item = &'a mut Tensor<T>>, lr: f64) -> Result<()> {
    if lr.is_nan() || lr < 0.0 {
        return Err(Error::param(format!("learning rate must be non-negative, got {lr}")));
    }
    let params: Vec<&mut Tensor<T>> = params.into_iter().filter(|t| t.requires_grad).collect();
    if params.iter().any(|t| t.grad.is_none()) {
        return Err(Error::usage("sgd_step on a parameter without a gradient"));
    }
    let step = T::of(lr);
    for t in params {
        let g = t.grad.take().expect("checked above");
        for (p, d) in t.data_mut().iter_mut().zip(g) {
            *p -= step * d;
        }
    }
    Ok(())
}

/// SGD with heavy-ball momentum and optional decoupled weight decay.
#[derive(Clone, Debug)]
pub struct MomentumSgd<T: Real> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Vec<T>>,
}

impl<T: Real> MomentumSgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        MomentumSgd {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        let (mu, wd, step) = (T::of(self.momentum), T::of(self.weight_decay), T::of(lr));
        for (name, t) in store.iter_mut() {
            if !t.requires_grad {
                continue;
            }
            let g = t
                .grad
                .take()
                .ok_or_else(|| Error::usage(format!("`{name}` has no gradient")))?;
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); g.len()]);
            for ((p, vi), gi) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = mu * *vi + gi + wd * *p;
                *p -= step * *vi;
            }
        }
        Ok(())
    }
}
