//! Measurement toolkit: hidden-state sampling, spectrum reports, percentile
//! bootstrap intervals and the exact McNemar test.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::base_lm::DecoderModel;
use crate::error::{Error, Result};
use crate::numerics::{svd_cumvariance, RngState, Scalar, Tensor};
use crate::tokenizer::Batch;

/// Seed used for every reported bootstrap interval.
pub const BOOTSTRAP_SEED: u64 = 20260514;
pub const BOOTSTRAP_RESAMPLES: usize = 10_000;

/// Samples `n_tokens` masked positions uniformly without replacement and
/// returns their final-layer states as `[n_tokens, d]`.
pub fn collect_hidden_states<S: Scalar>(
    model: &DecoderModel<S>,
    sentences: &[Vec<usize>],
    n_tokens: usize,
    rng: &mut RngState,
) -> Result<Tensor<S>> {
    let mut positions = Vec::new();
    for (s, sent) in sentences.iter().enumerate() {
        // position t predicts sent[t + 1]
        for t in 0..sent.len().saturating_sub(1) {
            positions.push((s, t));
        }
    }
    if n_tokens == 0 || positions.len() < n_tokens {
        return Err(Error::OutOfRange(format!("corpus has {} scored positions, {n_tokens} requested", positions.len())));
    }
    let mut picked: Vec<(usize, usize)> = rng.sample_indices(positions.len(), n_tokens).into_iter().map(|i| positions[i]).collect();
    let order = picked.clone();
    picked.sort_unstable();
    let d = model.config.d_model;
    let mut rows: BTreeMap<(usize, usize), Vec<S>> = BTreeMap::new();
    let mut i = 0;
    while i < picked.len() {
        let s = picked[i].0;
        let sent = &sentences[s];
        let len = sent.len().min(model.config.max_seq);
        let hidden = model.forward(&sent[..len], 1, len)?.hidden;
        while i < picked.len() && picked[i].0 == s {
            let t = picked[i].1;
            if t >= len {
                return Err(Error::OutOfRange(format!("sentence {s} longer than max_seq")));
            }
            rows.insert(picked[i], hidden.data()[t * d..(t + 1) * d].to_vec());
            i += 1;
        }
    }
    let data: Vec<S> = order.iter().flat_map(|p| rows[p].clone()).collect();
    Tensor::new(vec![n_tokens, d], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumReport {
    pub singular_values: Vec<f64>,
    pub cumvar: Vec<f64>,
    /// Threshold (as text, e.g. "0.95") to minimal rank.
    pub rank_at: BTreeMap<String, usize>,
    /// Cumulative variance at each requested rank.
    pub marks: Vec<(usize, f64)>,
}

impl SpectrumReport {
    /// `k<TAB>cumvar` lines followed by the rank summary.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, c) in self.cumvar.iter().enumerate() {
            let _ = writeln!(s, "{}\t{:.6}", i + 1, c);
        }
        s.push_str("# rank_at\n");
        for (t, r) in &self.rank_at {
            let _ = writeln!(s, "# {t}\t{r}");
        }
        s.push_str("# cumvar_at\n");
        for (k, c) in &self.marks {
            let _ = writeln!(s, "# K={k}\t{c:.6}");
        }
        s
    }

    pub fn rank(&self, threshold: f64) -> Option<usize> {
        self.rank_at.get(&threshold_key(threshold)).copied()
    }
}

fn threshold_key(t: f64) -> String {
    format!("{t:.2}")
}

pub fn bottleneck_report<S: Scalar>(h: &Tensor<S>, thresholds: &[f64], k_marks: &[usize]) -> Result<SpectrumReport> {
    let sp = svd_cumvariance(h)?;
    let mut rank_at = BTreeMap::new();
    for &t in thresholds {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid("thresholds", format!("{t} is not in [0, 1]")));
        }
        rank_at.insert(threshold_key(t), sp.rank_at(t));
    }
    let marks = k_marks.iter().map(|&k| (k, sp.cumvar_at(k))).collect();
    Ok(SpectrumReport { singular_values: sp.singular_values, cumvar: sp.cumvar, rank_at, marks })
}

/// Percentile bootstrap 95% interval of the mean.
pub fn bootstrap_ci(samples: &[f64], resamples: usize, seed: u64) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Empty("bootstrap samples"));
    }
    if resamples == 0 {
        return Err(Error::invalid("resamples", "must be positive"));
    }
    let n = samples.len();
    let mut rng = RngState::new(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| samples[rng.below(n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    Ok((percentile(&means, 0.025), percentile(&means, 0.975)))
}

/// Linear interpolation between order statistics of a sorted slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

/// Joint correctness counts of systems A and B on the same instances.
/// `n10` counts A right, B wrong.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PairedOutcomes {
    pub n00: usize,
    pub n01: usize,
    pub n10: usize,
    pub n11: usize,
}

impl PairedOutcomes {
    pub fn from_vectors(a: &[bool], b: &[bool]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::shape("paired outcomes need equal-length vectors"));
        }
        let mut o = Self::default();
        for (&x, &y) in a.iter().zip(b) {
            match (x, y) {
                (false, false) => o.n00 += 1,
                (false, true) => o.n01 += 1,
                (true, false) => o.n10 += 1,
                (true, true) => o.n11 += 1,
            }
        }
        Ok(o)
    }

    pub fn total(&self) -> usize {
        self.n00 + self.n01 + self.n10 + self.n11
    }
}

/// Two-sided exact McNemar test on the discordant pairs.
pub fn mcnemar_exact(o: &PairedOutcomes) -> Result<f64> {
    let (b, c) = (o.n10, o.n01);
    let n = b + c;
    if n == 0 {
        return Err(Error::UndefinedTest("McNemar with no discordant pairs"));
    }
    let k = b.min(c);
    // P(X <= k), X ~ Binomial(n, 1/2), summed in log space
    let ln_half_n = -(n as f64) * std::f64::consts::LN_2;
    let mut ln_choose = 0.0;
    let mut tail = 0.0;
    for i in 0..=k {
        if i > 0 {
            ln_choose += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        tail += (ln_choose + ln_half_n).exp();
    }
    Ok((2.0 * tail.min(0.5)).min(1.0))
}

/// Mean and bootstrap interval of a 0/1 correctness vector.
pub fn accuracy_ci(correct: &[bool], resamples: usize, seed: u64) -> Result<(f64, (f64, f64))> {
    let xs: Vec<f64> = correct.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
    let ci = bootstrap_ci(&xs, resamples, seed)?;
    Ok((xs.iter().sum::<f64>() / xs.len().max(1) as f64, ci))
}

/// Masked positions of a batch (row-major), for sampling hidden states.
pub fn masked_positions(b: &Batch) -> Vec<usize> {
    b.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
}
