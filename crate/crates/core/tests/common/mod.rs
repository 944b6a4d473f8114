//! Helpers shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use acros_core::acros::{build_induction_loss, AcrosModel, InductionConfig, SenseConfig, Trainable};
use acros_core::base_lm::{DecoderConfig, DecoderModel};
use acros_core::numerics::{Graph, RngState};

/// d = 8, K = 2, V = 11 model with a nonzero gate and randomized pathway.
pub fn tiny_acros(seed: u64) -> AcrosModel<f64> {
    let cfg = DecoderConfig { n_layers: 1, d_model: 8, n_heads: 2, vocab_size: 11, max_seq: 8, tie_head: true };
    let mut rng = RngState::new(seed);
    let backbone = DecoderModel::<f64>::init(cfg, &mut rng).unwrap();
    let mut m = AcrosModel::new(backbone, SenseConfig::new(2, 8), &mut rng).unwrap();
    // scale everything up so the check is not dominated by near-zero entries
    for t in m.params.values_mut() {
        for x in t.data_mut() {
            *x = *x * 20.0 + 0.1 * rng.normal();
        }
    }
    m.set_gate(0.8);
    m
}

/// Induction loss of `model` on one fixed micro-batch.
pub fn induction_value(model: &AcrosModel<f64>, tokens: &[usize], labels: &[usize], mask: &[bool], batch: usize, seq: usize) -> f64 {
    let mut g = Graph::new();
    let v = model.build(&mut g, tokens, batch, seq, Trainable::NONE).unwrap();
    let loss = build_induction_loss(&mut g, &v, model.sense.k, labels, mask, &InductionConfig::default()).unwrap();
    g.value(loss).data()[0]
}

/// Largest relative error between backprop and central differences over
/// every pathway parameter coordinate. Returns (max error, coordinates checked).
pub fn induction_gradcheck(model: &AcrosModel<f64>, tokens: &[usize], labels: &[usize], mask: &[bool], batch: usize, seq: usize) -> (f64, usize) {
    let mut g = Graph::new();
    let v = model.build(&mut g, tokens, batch, seq, Trainable::PATHWAY).unwrap();
    let loss = build_induction_loss(&mut g, &v, model.sense.k, labels, mask, &InductionConfig::default()).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(g.trainable_params().iter().all(|(n, _)| !n.starts_with("backbone.")), "backbone must not be trainable");
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (name, var) in g.trainable_params() {
        let an = grads.get(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(*var).numel()]);
        for (i, &a) in an.iter().enumerate() {
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.params.get_mut(name.as_str()).unwrap().data_mut()[i] += delta;
                induction_value(&m, tokens, labels, mask, batch, seq)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let abs = (a - fd).abs();
            let rel = if abs < 1e-8 { 0.0 } else { abs / a.abs().max(fd.abs()).max(1e-4) };
            worst = worst.max(rel);
            checked += 1;
        }
    }
    (worst, checked)
}

/// A T = 4 micro-batch of two rows over V = 11 with one padded label.
pub fn micro_batch() -> (Vec<usize>, Vec<usize>, Vec<bool>) {
    let tokens = vec![2, 5, 7, 3, 2, 9, 10, 4];
    let labels = vec![5, 7, 3, 8, 9, 10, 4, 0];
    let mask = labels.iter().map(|&l| l != 0).collect();
    (tokens, labels, mask)
}
