use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
}

impl AdamState {
    pub fn zeros(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// Named parameters with their optimizer state.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    pub params: BTreeMap<String, Tensor<f32>>,
    pub adam: BTreeMap<String, AdamState>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f32>) {
        let name = name.into();
        self.adam.insert(name.clone(), AdamState::zeros(value.len()));
        self.params.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.get(name)
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn cast<T: super::Real>(&self) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), v.cast()))
            .collect()
    }
}

/// One Adam update with bias correction; increments each parameter's step count.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &BTreeMap<String, Tensor<f32>>,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, p) in &store.params {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Shape(format!("missing gradient for `{name}`")))?;
        if g.shape() != p.shape() {
            return Err(Error::Shape(format!(
                "gradient for `{name}` has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    if let Some(extra) = grads.keys().find(|k| !store.params.contains_key(*k)) {
        return Err(Error::Shape(format!("gradient for unknown parameter `{extra}`")));
    }

    for (name, p) in store.params.iter_mut() {
        let g = &grads[name];
        let state = store
            .adam
            .entry(name.clone())
            .or_insert_with(|| AdamState::zeros(p.len()));
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (((pv, &gv), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(state.m.iter_mut())
            .zip(state.v.iter_mut())
        {
            let gv = gv as f64;
            let m_new = cfg.beta1 * *m as f64 + (1.0 - cfg.beta1) * gv;
            let v_new = cfg.beta2 * *v as f64 + (1.0 - cfg.beta2) * gv * gv;
            *m = m_new as f32;
            *v = v_new as f32;
            let m_hat = m_new / bc1;
            let v_hat = v_new / bc2;
            *pv = (*pv as f64 - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps)) as f32;
        }
    }
    Ok(())
}
