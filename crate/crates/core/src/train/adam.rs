use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments per parameter name, plus the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        AdamState { step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Stores the moments as `adam_m/` and `adam_v/` records.
    pub fn write_to(&self, ck: &mut Checkpoint, cfg: &AdamConfig) -> Result<()> {
        ck.set("optimizer", serde_json::json!({ "kind": "adam", "step": self.step, "config": cfg }))?;
        for (n, t) in &self.m {
            ck.tensors.insert(format!("adam_m/{n}"), t.cast());
        }
        for (n, t) in &self.v {
            ck.tensors.insert(format!("adam_v/{n}"), t.cast());
        }
        Ok(())
    }

    pub fn read_from(ck: &Checkpoint) -> Result<Self> {
        let step = ck
            .get("optimizer")
            .and_then(|o| o.get("step"))
            .and_then(|s| s.as_u64())
            .ok_or_else(|| Error::data("checkpoint has no optimizer state"))?;
        let mut st = AdamState { step, ..Self::new() };
        for (k, t) in &ck.tensors {
            if let Some(n) = k.strip_prefix("adam_m/") {
                st.m.insert(n.to_string(), t.cast());
            } else if let Some(n) = k.strip_prefix("adam_v/") {
                st.v.insert(n.to_string(), t.cast());
            }
        }
        Ok(st)
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
/// All gradients are checked for finiteness before anything is modified.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for parameter `{name}`")));
        }
        let p = store.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape(format!("gradient {:?} for parameter `{name}` of shape {:?}", g.shape(), p.shape())));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let (lr, eps) = (T::c(cfg.lr), T::c(cfg.eps));
    for (name, g) in grads {
        let p = store.get_mut(name)?;
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        for (((pv, mv), vv), &gv) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
            *mv = b1 * *mv + (T::one() - b1) * gv;
            *vv = b2 * *vv + (T::one() - b2) * gv * gv;
            let mhat = *mv / c1;
            let vhat = *vv / c2;
            *pv -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
