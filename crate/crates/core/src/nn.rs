//! Named parameter storage and the per-forward binding context.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::ops::{BnMode, BN_MOMENTUM};
use crate::tensor::{Gradients, Scalar, Tape, Tensor, Var};

/// Trainable parameters plus non-trainable buffers (running statistics),
/// both keyed by dotted names.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Rc<Tensor<T>>>,
    buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new(), buffers: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), Rc::new(value));
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.buffers.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Rc<Tensor<T>>> {
        self.params.get(name).ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .map(Rc::make_mut)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers.get(name).ok_or_else(|| Error::config(format!("unknown buffer `{name}`")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.buffers.get_mut(name).ok_or_else(|| Error::config(format!("unknown buffer `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), Rc::new(v.cast()))).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Copies every parameter and buffer whose name starts with `prefix`
    /// from `other`. Shapes must match; returns the number copied.
    pub fn load_prefix(&mut self, other: &ParamStore<T>, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (name, value) in other.params.iter().filter(|(k, _)| k.starts_with(prefix)) {
            let slot = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::config(format!("pretrained parameter `{name}` has no counterpart")))?;
            if slot.shape() != value.shape() {
                return Err(Error::config(format!(
                    "pretrained parameter `{name}` has shape {:?}, model expects {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value.clone();
            copied += 1;
        }
        for (name, value) in other.buffers.iter().filter(|(k, _)| k.starts_with(prefix)) {
            if let Some(slot) = self.buffers.get_mut(name) {
                if slot.shape() == value.shape() {
                    *slot = value.clone();
                }
            }
        }
        if copied == 0 {
            return Err(Error::config(format!("no parameters with prefix `{prefix}` to load")));
        }
        Ok(copied)
    }
}

/// Binds a [`ParamStore`] to a tape for one forward pass. Batch-norm
/// running-statistic updates are collected and applied by the caller.
pub struct Ctx<'t, T: Scalar> {
    pub tape: &'t Tape<T>,
    store: &'t ParamStore<T>,
    train: bool,
    bn_updates: RefCell<Vec<(String, Tensor<T>, Tensor<T>)>>,
}

impl<'t, T: Scalar> Ctx<'t, T> {
    pub fn new(tape: &'t Tape<T>, store: &'t ParamStore<T>, train: bool) -> Self {
        Ctx { tape, store, train, bn_updates: RefCell::default() }
    }

    pub fn train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &'t ParamStore<T> {
        self.store
    }

    pub fn p(&self, name: &str) -> Result<Var<'t, T>> {
        let value = self.store.get(name)?.clone();
        Ok(self.tape.named_leaf(name, value))
    }

    /// Batch normalization with parameters `{prefix}.gamma/.beta` and running
    /// statistics `{prefix}.running_mean/.running_var`.
    pub fn batchnorm(&self, x: Var<'t, T>, prefix: &str) -> Result<Var<'t, T>> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        if self.train {
            let out = x.batchnorm(gamma, beta, BnMode::Train)?;
            if let Some((m, v)) = out.batch_stats {
                self.bn_updates.borrow_mut().push((prefix.to_string(), m, v));
            }
            Ok(out.y)
        } else {
            let mean = self.store.buffer(&format!("{prefix}.running_mean"))?;
            let var = self.store.buffer(&format!("{prefix}.running_var"))?;
            Ok(x.batchnorm(gamma, beta, BnMode::Eval { mean, var })?.y)
        }
    }

    /// Running-statistic updates produced during this forward.
    pub fn take_bn_updates(&self) -> Vec<(String, Tensor<T>, Tensor<T>)> {
        std::mem::take(&mut self.bn_updates.borrow_mut())
    }
}

/// Applies collected batch statistics with momentum [`BN_MOMENTUM`].
pub fn apply_bn_updates<T: Scalar>(store: &mut ParamStore<T>, updates: Vec<(String, Tensor<T>, Tensor<T>)>) -> Result<()> {
    let m = T::c(BN_MOMENTUM);
    for (prefix, mean, var) in updates {
        for (suffix, batch) in [("running_mean", mean), ("running_var", var)] {
            let buf = store.buffer_mut(&format!("{prefix}.{suffix}"))?;
            for (r, &b) in buf.data_mut().iter_mut().zip(batch.data()) {
                *r = (T::one() - m) * *r + m * b;
            }
        }
    }
    Ok(())
}

/// Named gradients for every parameter in `store`.
pub fn collect_grads<T: Scalar>(store: &ParamStore<T>, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
    store
        .params()
        .map(|(name, p)| {
            let g = grads.named(name).cloned().unwrap_or_else(|| Tensor::zeros(p.shape()));
            (name.to_string(), g)
        })
        .collect()
}

/// He-normal initialization for a convolution kernel `[C_out, C_in, k...]`.
pub fn he_normal<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let fan_in: usize = shape[1..].iter().product();
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape, |_| T::c(normal.sample(rng)))
}

/// Truncated normal (resampled beyond two standard deviations).
pub fn trunc_normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 {
            break T::c(v * std);
        }
    })
}

/// Uniform in `[-bound, bound]`.
pub fn uniform<T: Scalar>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::c(rng.random_range(-bound..=bound)))
}
