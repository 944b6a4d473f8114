//! AdamW with linear warmup, cosine decay and global-norm clipping.

use std::collections::BTreeMap;

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    /// Final learning rate as a fraction of `lr` at the end of cosine decay.
    pub min_lr_ratio: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
            warmup_ratio: 0.02,
            min_lr_ratio: 0.1,
            clip_norm: Some(1.0),
        }
    }
}

impl AdamWConfig {
    /// Learning rate at 0-based `step` of `total` steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let total = total.max(1);
        let warm = ((self.warmup_ratio * total as f64).ceil() as usize).max(1);
        if step < warm {
            return self.lr * (step + 1) as f64 / warm as f64;
        }
        let span = (total - warm).max(1) as f64;
        let progress = ((step - warm) as f64 / span).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cos)
    }
}

/// Parameters excluded from weight decay: biases, layer-norm affine terms and
/// the scalar gate.
pub fn decays(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    let is_norm = name.split('.').any(|part| part.starts_with("ln"));
    !(leaf.starts_with("b_") || leaf == "bias" || leaf == "gate" || is_norm)
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    total_steps: usize,
    step: usize,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, total_steps: usize) -> Self {
        Self { config, total_steps, step: 0, state: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Applies one update to each named parameter. Returns the pre-clip
    /// global gradient norm.
    pub fn step<S: Scalar>(
        &mut self,
        params: &mut BTreeMap<String, Tensor<S>>,
        grads: &[(String, Vec<f64>)],
    ) -> Result<f64> {
        self.step_groups(&mut [("", params)], grads)
    }

    /// Like [`AdamW::step`] over several parameter maps. A gradient named
    /// `prefix + key` updates `key` of the first group with that prefix that
    /// holds it; the full name drives the weight-decay rule and moment state.
    pub fn step_groups<S: Scalar>(
        &mut self,
        groups: &mut [(&str, &mut BTreeMap<String, Tensor<S>>)],
        grads: &[(String, Vec<f64>)],
    ) -> Result<f64> {
        let locate = |groups: &[(&str, &mut BTreeMap<String, Tensor<S>>)], name: &str| -> Option<(usize, String)> {
            groups.iter().enumerate().find_map(|(i, (prefix, map))| {
                let key = name.strip_prefix(prefix)?;
                map.contains_key(key).then(|| (i, key.to_string()))
            })
        };
        let mut sq = 0.0;
        let mut targets = Vec::with_capacity(grads.len());
        for (name, g) in grads {
            let (gi, key) = locate(groups, name).ok_or_else(|| Error::Graph(format!("no parameter named {name}")))?;
            let n = groups[gi].1[&key].numel();
            if n != g.len() {
                return Err(Error::shape(format!("gradient for {name} has {} values, parameter {n}", g.len())));
            }
            sq += g.iter().map(|x| x * x).sum::<f64>();
            targets.push((gi, key));
        }
        let gnorm = sq.sqrt();
        if !gnorm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm at step {}", self.step)));
        }
        let clip = match self.config.clip_norm {
            Some(c) if gnorm > c => c / gnorm,
            _ => 1.0,
        };
        let lr = self.config.lr_at(self.step, self.total_steps);
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for ((name, g), (gi, key)) in grads.iter().zip(targets) {
            let p = groups[gi].1.get_mut(&key).expect("located above");
            let st = self
                .state
                .entry(name.clone())
                .or_insert_with(|| Moments { m: vec![0.0; g.len()], v: vec![0.0; g.len()] });
            let wd = if decays(name) { self.config.weight_decay } else { 0.0 };
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let gi = g[i] * clip;
                st.m[i] = b1 * st.m[i] + (1.0 - b1) * gi;
                st.v[i] = b2 * st.v[i] + (1.0 - b2) * gi * gi;
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                let mut w = x.as_f64();
                w -= lr * wd * w;
                w -= lr * mhat / (vhat.sqrt() + self.config.eps);
                *x = S::of(w);
            }
        }
        Ok(gnorm)
    }
}
