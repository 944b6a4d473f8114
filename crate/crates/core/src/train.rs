//! Shared training-loop plumbing: parameter maps, hashing, batch streams and
//! the optimizer step over a recorded graph.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{AdamW, AdamWConfig, Graph, RngState, Scalar, Tensor, Var};
use crate::tokenizer::{make_batches, Batch};

/// Named parameters of one model component.
pub type ParamMap<S> = BTreeMap<String, Tensor<S>>;

/// SHA-256 over names, shapes and little-endian values, as lowercase hex.
pub fn param_hash<S: Scalar>(params: &ParamMap<S>) -> String {
    let mut h = Sha256::new();
    let mut buf = Vec::new();
    for (name, t) in params {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.rank() as u64).to_le_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        buf.clear();
        for &x in t.data() {
            x.extend_le_bytes(&mut buf);
        }
        h.update(&buf);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn param_count<S: Scalar>(params: &ParamMap<S>) -> usize {
    params.values().map(Tensor::numel).sum()
}

pub fn cast_params<S: Scalar, T: Scalar>(params: &ParamMap<S>) -> ParamMap<T> {
    params.iter().map(|(k, v)| (k.clone(), v.cast())).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub optim: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 600, batch_size: 16, seq_len: 32, optim: AdamWConfig::default() }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        if self.seq_len < 2 {
            return Err(Error::invalid("seq_len", "must be at least 2"));
        }
        if !(self.optim.lr > 0.0 && self.optim.lr.is_finite()) {
            return Err(Error::invalid("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.optim.warmup_ratio) {
            return Err(Error::invalid("warmup_ratio", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Per-step training losses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

impl TrainLog {
    fn window_mean(&self, head: bool) -> Option<f64> {
        let n = self.losses.len();
        if n == 0 {
            return None;
        }
        let w = (n / 10).max(1);
        let xs = if head { &self.losses[..w] } else { &self.losses[n - w..] };
        Some(xs.iter().sum::<f64>() / w as f64)
    }

    pub fn first_decile_mean(&self) -> Option<f64> {
        self.window_mean(true)
    }

    pub fn last_decile_mean(&self) -> Option<f64> {
        self.window_mean(false)
    }

    /// Mean loss over the last 10% of steps is strictly below the first 10%.
    pub fn improved(&self) -> bool {
        matches!((self.first_decile_mean(), self.last_decile_mean()), (Some(a), Some(b)) if b < a)
    }
}

/// Endless shuffled batches over a token stream; reshuffles on every epoch.
#[derive(Debug)]
pub struct BatchStream {
    ids: Vec<usize>,
    seq: usize,
    batch: usize,
    rng: RngState,
    queue: std::vec::IntoIter<Batch>,
}

impl BatchStream {
    pub fn new(ids: Vec<usize>, seq: usize, batch: usize, mut rng: RngState) -> Result<Self> {
        let first = make_batches(&ids, seq, batch, &mut rng)?;
        Ok(Self { ids, seq, batch, rng, queue: first.into_iter() })
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        if let Some(b) = self.queue.next() {
            return Ok(b);
        }
        self.queue = make_batches(&self.ids, self.seq, self.batch, &mut self.rng)?.into_iter();
        self.queue.next().ok_or(Error::Empty("batch stream"))
    }
}

/// Backpropagates `loss` and applies one optimizer update to every trainable
/// parameter bound in `g`. Returns the loss value.
pub(crate) fn optimizer_step<S: Scalar>(
    opt: &mut AdamW,
    g: &Graph<S>,
    loss: Var,
    step: usize,
    groups: &mut [(&str, &mut ParamMap<S>)],
) -> Result<f64> {
    let value = g.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::Divergence { step, loss: value });
    }
    let grads = g.backward(loss)?;
    let named: Vec<(String, Vec<f64>)> = g
        .trainable_params()
        .iter()
        .map(|(name, v)| {
            let gv = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(*v).numel()]);
            (name.clone(), gv)
        })
        .collect();
    opt.step_groups(groups, &named).map_err(|e| match e {
        Error::NonFinite(_) => Error::Divergence { step, loss: value },
        other => other,
    })?;
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_tracks_values_and_names() {
        let mut a: ParamMap<f32> = BTreeMap::new();
        a.insert("w".into(), Tensor::vector(vec![1.0, 2.0]));
        let h = param_hash(&a);
        assert_eq!(h.len(), 64);
        assert_eq!(h, param_hash(&a.clone()));
        let mut b = a.clone();
        b.get_mut("w").unwrap().data_mut()[1] = 2.5;
        assert_ne!(h, param_hash(&b));
        let mut c: ParamMap<f32> = BTreeMap::new();
        c.insert("v".into(), Tensor::vector(vec![1.0, 2.0]));
        assert_ne!(h, param_hash(&c));
    }

    #[test]
    fn decile_comparison() {
        let log = TrainLog { losses: (0..20).map(|i| 10.0 - i as f64).collect() };
        assert!(log.improved());
        let flat = TrainLog { losses: vec![1.0; 20] };
        assert!(!flat.improved());
    }
}
