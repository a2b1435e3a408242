//! Adam with decoupled weight decay. Moments live in the parameter precision;
//! the update itself is computed in f64.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Grads;
use crate::error::{Error, Result};
use crate::model::checkpoint::{read_blob, write_blob};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied to matrices only; vectors (biases, norms) are not decayed.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub steps: u64,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, n_params: usize) -> Self {
        Self {
            config,
            steps: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        }
    }

    /// One update on every trainable parameter that received a gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>, lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} params, store has {}, grads have {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.steps += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        for (idx, g) in grads.iter() {
            let (_, p) = params.by_index_mut(idx);
            if !p.trainable {
                continue;
            }
            let decay = if p.shape.len() >= 2 { c.weight_decay } else { 0.0 };
            let w = p.value.as_mut().ok_or_else(|| Error::Config("optimizer on a shape-only model".into()))?;
            let m = self.m[idx].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[idx].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for (((wi, &gi), mi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                let gi = gi.as_f64();
                let mut x = wi.as_f64() * (1.0 - lr * decay);
                let mn = c.beta1 * mi.as_f64() + (1.0 - c.beta1) * gi;
                let vn = c.beta2 * vi.as_f64() + (1.0 - c.beta2) * gi * gi;
                *mi = T::from_f64(mn);
                *vi = T::from_f64(vn);
                x -= lr * (mn / bc1) / ((vn / bc2).sqrt() + c.eps);
                *wi = T::from_f64(x);
            }
        }
        Ok(())
    }

    /// Moments as `{stem}.json/.bin`, keyed `m/<param>` and `v/<param>`.
    pub fn save(&self, dir: &Path, stem: &str, params: &ParamStore<T>) -> Result<()> {
        let mut items = Vec::new();
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            let name = params.by_index(i).0;
            if let (Some(m), Some(v)) = (m, v) {
                items.push((format!("m/{name}"), m));
                items.push((format!("v/{name}"), v));
            }
        }
        write_blob(dir, stem, items.iter().map(|(n, t)| (n.as_str(), *t, true)))
    }

    pub fn load(config: AdamWConfig, steps: u64, dir: &Path, stem: &str, params: &ParamStore<T>) -> Result<Self> {
        let mut opt = Self::new(config, params.len());
        opt.steps = steps;
        for (key, p) in read_blob::<T>(dir, stem)? {
            let (kind, name) = key
                .split_once('/')
                .ok_or_else(|| Error::Serde(format!("optimizer state key `{key}`")))?;
            let idx = params.index_of(name).ok_or_else(|| Error::CheckpointMismatch {
                field: name.to_string(),
                message: "optimizer state for unknown parameter".into(),
            })?;
            let slot = match kind {
                "m" => &mut opt.m[idx],
                "v" => &mut opt.v[idx],
                _ => return Err(Error::Serde(format!("optimizer state key `{key}`"))),
            };
            *slot = p.value;
        }
        Ok(opt)
    }
}
