use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{ParamStore, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with a constant learning rate.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Tensor<T>>,
    second: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Every store is searched for each gradient's name;
    /// parameters without a gradient are left untouched.
    pub fn step(
        &mut self,
        stores: &mut [&mut ParamStore<T>],
        grads: &BTreeMap<String, Tensor<T>>,
    ) -> Result<(), TensorError> {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let step_size = T::of(c.lr / bc1);
        let bc2_sqrt = T::of(bc2.sqrt());
        let eps = T::of(c.eps);
        for (name, g) in grads {
            let param = stores
                .iter_mut()
                .find_map(|s| s.get_mut(name))
                .ok_or_else(|| TensorError::MissingTensor(name.clone()))?;
            let m = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((p, &gv), mv), vv) in param
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                *p -= step_size * *mv / (vv.sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }

    /// Moment tensors under `m/<name>` and `v/<name>`.
    pub fn state_tensors(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (k, t) in &self.first {
            out.insert(format!("m/{k}"), t.clone());
        }
        for (k, t) in &self.second {
            out.insert(format!("v/{k}"), t.clone());
        }
        out
    }

    pub fn restore(config: AdamConfig, step: u64, state: &ParamStore<T>) -> Self {
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for (k, t) in state.iter() {
            if let Some(rest) = k.strip_prefix("m/") {
                first.insert(rest.to_string(), t.clone());
            } else if let Some(rest) = k.strip_prefix("v/") {
                second.insert(rest.to_string(), t.clone());
            }
        }
        Self { config, step, first, second }
    }
}
