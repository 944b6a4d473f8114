//! Senses as alignment anchors: cipher-language parallel pairs, context and
//! sense InfoNCE, the three-phase adaptation schedule and retrieval R@1.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::acros::{AcrosModel, AcrosVars, Trainable};
use crate::base_lm::{perplexity_with, BACKBONE};
use crate::error::{Error, Result};
use crate::numerics::kernels::{dot, norm};
use crate::numerics::{stage_rng, AdamW, AdamWConfig, Graph, RngState, Scalar, Stage, Var};
use crate::tokenizer::{Batch, Vocab, BOS, PAD, UNK};
use crate::train::{optimizer_step, TrainLog};

pub const CIPHER_MARK: &str = "~";
pub const POOL_TEMPERATURE: f64 = 0.7;
pub const LABEL_SMOOTHING: f64 = 0.05;

/// Bijection from source surface forms to `~`-marked target forms.
#[derive(Clone, Debug, PartialEq)]
pub struct CipherSpec {
    pub map: BTreeMap<String, String>,
    pub seed: u64,
}

impl CipherSpec {
    /// Permutes the ordinary tokens of `vocab` under `seed` and marks every
    /// image with `~`, so target forms never collide with source forms.
    pub fn new(vocab: &Vocab, seed: u64) -> Result<Self> {
        let words: Vec<String> = vocab.tokens().iter().filter(|t| !is_special(vocab, t)).cloned().collect();
        if words.iter().any(|w| w.starts_with(CIPHER_MARK)) {
            return Err(Error::invalid("vocab", "source tokens may not start with the cipher mark"));
        }
        let mut images = words.clone();
        stage_rng(seed, Stage::Adaptation).fork(1).shuffle(&mut images);
        let map = words.into_iter().zip(images).map(|(w, i)| (w, format!("{CIPHER_MARK}{i}"))).collect();
        Ok(Self { map, seed })
    }

    pub fn encipher(&self, sentence: &str) -> Result<String> {
        let out = sentence
            .split_whitespace()
            .map(|w| self.map.get(w).cloned().ok_or_else(|| Error::invalid("cipher", format!("token {w:?} is not covered"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(out.join(" "))
    }

    pub fn decipher(&self, sentence: &str) -> Result<String> {
        let inv: BTreeMap<&str, &str> = self.map.iter().map(|(a, b)| (b.as_str(), a.as_str())).collect();
        let out = sentence
            .split_whitespace()
            .map(|w| inv.get(w).map(|s| s.to_string()).ok_or_else(|| Error::invalid("cipher", format!("token {w:?} has no preimage"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(out.join(" "))
    }
}

fn is_special(vocab: &Vocab, t: &str) -> bool {
    matches!(vocab.id(t), Some(id) if id == PAD || id == UNK || id == BOS)
}

/// BOS-prefixed source ids and their token-wise cipher image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelPair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// Extends `vocab` with the cipher image (in source-vocabulary order) and
/// encodes every sentence with its enciphered twin.
pub fn make_parallel_corpus(sentences: &[String], cipher: &CipherSpec, vocab: &Vocab) -> Result<(Vocab, Vec<ParallelPair>)> {
    let mut ext = vocab.clone();
    let images: Vec<String> =
        vocab.tokens().iter().filter(|t| !is_special(vocab, t)).map(|t| cipher.map.get(t).cloned().unwrap_or_default()).collect();
    if images.iter().any(String::is_empty) {
        return Err(Error::invalid("cipher", "cipher does not cover the source vocabulary"));
    }
    ext.extend(images);
    let pairs = sentences
        .iter()
        .map(|s| {
            let source = vocab.encode_with_bos(s);
            if source.contains(&UNK) {
                return Err(Error::invalid("cipher", format!("sentence has unknown tokens: {s:?}")));
            }
            let target = ext.encode_with_bos(&cipher.encipher(s)?);
            Ok(ParallelPair { source, target })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((ext, pairs))
}

pub fn write_pairs(path: &Path, vocab: &Vocab, pairs: &[ParallelPair]) -> Result<()> {
    let mut body = String::new();
    for p in pairs {
        let _ = writeln!(body, "{}\t{}", vocab.decode(&p.source[1..])?, vocab.decode(&p.target[1..])?);
    }
    std::fs::write(path, body)?;
    Ok(())
}

pub fn read_pairs(path: &Path, vocab: &Vocab) -> Result<Vec<ParallelPair>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (s, t) = l.split_once('\t').ok_or_else(|| Error::format(format!("pair line needs a tab: {l:?}")))?;
            Ok(ParallelPair { source: vocab.encode_with_bos(s), target: vocab.encode_with_bos(t) })
        })
        .collect()
}

/// Index of the last non-pad token.
fn last_real(tokens: &[usize]) -> Result<usize> {
    tokens.iter().rposition(|&t| t != PAD).ok_or(Error::Empty("all-pad input"))
}

/// Final-layer state (`H`) at the last non-pad position.
pub fn context_embedding<S: Scalar>(model: &AcrosModel<S>, tokens: &[usize]) -> Result<Vec<f64>> {
    let n = last_real(tokens)? + 1;
    let t = model.forward(&tokens[..n], 1, n)?;
    Ok(t.row(&t.h, 0, n - 1))
}

/// Per position, slot contributions pooled with `softmax_k(‖u_k‖ / temp)`,
/// then averaged over non-pad positions.
pub fn sense_embedding<S: Scalar>(model: &AcrosModel<S>, tokens: &[usize], temp: f64) -> Result<Vec<f64>> {
    if !(temp > 0.0) {
        return Err(Error::invalid("pool_temperature", "must be positive"));
    }
    let n = last_real(tokens)? + 1;
    let t = model.forward(&tokens[..n], 1, n)?;
    let real: Vec<usize> = (0..n).filter(|&q| tokens[q] != PAD).collect();
    let mut out = vec![0.0; t.d];
    for &q in &real {
        let us: Vec<Vec<f64>> = (0..t.k).map(|k| t.u_vec(0, k, q).iter().map(|x| x.as_f64()).collect()).collect();
        let w = slot_weights(&us.iter().map(|u| norm(u)).collect::<Vec<_>>(), temp);
        for (u, wk) in us.iter().zip(&w) {
            for (o, x) in out.iter_mut().zip(u) {
                *o += wk * x / real.len() as f64;
            }
        }
    }
    Ok(out)
}

/// `softmax(norms / temp)`.
pub fn slot_weights(norms: &[f64], temp: f64) -> Vec<f64> {
    let m = norms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = norms.iter().map(|r| ((r - m) / temp).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Symmetric InfoNCE on rows of `anchors` and `positives` (value only).
pub fn info_nce(anchors: &[Vec<f64>], positives: &[Vec<f64>], temp: f64) -> Result<f64> {
    let n = anchors.len();
    if n == 0 || positives.len() != n {
        return Err(Error::shape("info_nce needs equal, non-empty row sets"));
    }
    if !(temp > 0.0) {
        return Err(Error::invalid("temperature", "must be positive"));
    }
    let unit = |v: &Vec<f64>| -> Result<Vec<f64>> {
        let s = norm(v);
        if !(s > 1e-12) {
            return Err(Error::DegenerateVector("InfoNCE row"));
        }
        Ok(v.iter().map(|x| x / s).collect())
    };
    let a = anchors.iter().map(unit).collect::<Result<Vec<_>>>()?;
    let p = positives.iter().map(unit).collect::<Result<Vec<_>>>()?;
    let sim: Vec<Vec<f64>> = a.iter().map(|x| p.iter().map(|y| dot(x, y) / temp).collect()).collect();
    let lse = |xs: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = xs.collect();
        let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    };
    let mut loss = 0.0;
    for i in 0..n {
        loss += lse(&mut sim[i].iter().copied()) - sim[i][i];
        loss += lse(&mut (0..n).map(|r| sim[r][i])) - sim[i][i];
    }
    Ok((loss / (2 * n) as f64).max(0.0))
}

/// `(1 − ε) NLL(gold) + ε · mean_v NLL(v)` over masked rows of `z [n, V]`.
pub fn target_lm_loss(z: &[Vec<f64>], labels: &[usize], mask: &[bool], eps: f64) -> Result<f64> {
    if z.len() != labels.len() || z.len() != mask.len() {
        return Err(Error::shape("target_lm_loss: row counts"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((row, &y), _) in z.iter().zip(labels).zip(mask).filter(|(_, &m)| m) {
        if y >= row.len() {
            return Err(Error::OutOfRange(format!("label {y} with vocab {}", row.len())));
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        let mean_nll = lse - row.iter().sum::<f64>() / row.len() as f64;
        sum += (1.0 - eps) * (lse - row[y]) + eps * mean_nll;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Empty("token mask (M = 0)"));
    }
    Ok(sum / count as f64)
}

/// Loss weights `(context InfoNCE, sense InfoNCE, target LM)` of one phase.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseWeights {
    pub ctx: f64,
    pub sense: f64,
    pub lm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Alignment,
    Middle,
    Polish,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptSchedule {
    pub total_steps: usize,
    /// Cumulative fractions where the middle and polish phases start.
    pub boundaries: (f64, f64),
    pub weights: [PhaseWeights; 3],
    /// Freeze the contextualizer with the sense network during polish.
    pub freeze_ctx_in_polish: bool,
}

impl AdaptSchedule {
    pub fn new(total_steps: usize) -> Self {
        Self {
            total_steps,
            boundaries: (0.2, 0.5),
            weights: [
                PhaseWeights { ctx: 1.0, sense: 1.0, lm: 0.2 },
                PhaseWeights { ctx: 0.5, sense: 0.5, lm: 1.0 },
                PhaseWeights { ctx: 0.1, sense: 0.1, lm: 1.0 },
            ],
            freeze_ctx_in_polish: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.boundaries;
        if !(0.0 <= a && a <= b && b <= 1.0) {
            return Err(Error::invalid("phase_boundaries", "need 0 <= a <= b <= 1"));
        }
        for w in &self.weights {
            if [w.ctx, w.sense, w.lm].iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
                return Err(Error::invalid("phase_weights", "weights must be finite and nonnegative"));
            }
        }
        Ok(())
    }

    fn starts(&self) -> (usize, usize) {
        let n = self.total_steps as f64;
        ((self.boundaries.0 * n).round() as usize, (self.boundaries.1 * n).round() as usize)
    }

    pub fn phase(&self, step: usize) -> Phase {
        let (m, p) = self.starts();
        if step < m {
            Phase::Alignment
        } else if step < p {
            Phase::Middle
        } else {
            Phase::Polish
        }
    }

    pub fn weights_at(&self, step: usize) -> PhaseWeights {
        self.weights[self.phase(step) as usize]
    }

    pub fn trainable(&self, phase: Phase, backbone: bool) -> Trainable {
        let polish = phase == Phase::Polish;
        Trainable { backbone, sense_net: !polish, ctx: !(polish && self.freeze_ctx_in_polish), gate: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptConfig {
    pub schedule: AdaptSchedule,
    pub batch_pairs: usize,
    pub nce_temperature: f64,
    pub pool_temperature: f64,
    pub label_smoothing: f64,
    pub train_backbone: bool,
    pub optim: AdamWConfig,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            schedule: AdaptSchedule::new(600),
            batch_pairs: 32,
            nce_temperature: 0.1,
            pool_temperature: POOL_TEMPERATURE,
            label_smoothing: LABEL_SMOOTHING,
            train_backbone: true,
            optim: AdamWConfig { lr: 2e-3, ..AdamWConfig::default() },
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_pairs < 2 {
            return Err(Error::invalid("batch_pairs", "InfoNCE needs at least two pairs"));
        }
        if !(self.nce_temperature > 0.0) {
            return Err(Error::invalid("nce_temperature", "must be positive"));
        }
        if !(self.pool_temperature > 0.0) {
            return Err(Error::invalid("pool_temperature", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::invalid("label_smoothing", "must lie in [0, 1)"));
        }
        if !(self.optim.lr > 0.0) {
            return Err(Error::invalid("lr", "must be positive"));
        }
        Ok(())
    }
}

/// Sources in rows `0..n`, targets in rows `n..2n`; only target rows are
/// scored by the LM term.
fn pair_batch(pairs: &[&ParallelPair]) -> Result<Batch> {
    let seqs: Vec<Vec<usize>> = pairs.iter().map(|p| p.source.clone()).chain(pairs.iter().map(|p| p.target.clone())).collect();
    let mut b = Batch::from_sequences(&seqs)?;
    let half = pairs.len() * b.seq;
    b.mask[..half].iter_mut().for_each(|m| *m = false);
    Ok(b)
}

fn adapt_loss<S: Scalar>(g: &mut Graph<S>, v: &AcrosVars, b: &Batch, k: usize, w: PhaseWeights, cfg: &AdaptConfig) -> Result<Var> {
    let n = b.batch / 2;
    let real: Vec<Vec<usize>> =
        (0..b.batch).map(|i| (0..b.seq).filter(|&t| b.tokens[i * b.seq + t] != PAD).map(|t| i * b.seq + t).collect()).collect();
    let last: Vec<usize> = real.iter().map(|r| *r.last().expect("pairs are non-empty")).collect();
    let ctx_src = g.gather(v.h, &last[..n])?;
    let ctx_tgt = g.gather(v.h, &last[n..])?;
    let pooled = g.slot_pool(v.u, k, cfg.pool_temperature)?;
    let sns = g.masked_mean(pooled, real)?;
    let rows: Vec<usize> = (0..b.batch).collect();
    let sns_src = g.gather(sns, &rows[..n])?;
    let sns_tgt = g.gather(sns, &rows[n..])?;
    let l_ctx = g.info_nce(ctx_src, ctx_tgt, cfg.nce_temperature)?;
    let l_sns = g.info_nce(sns_src, sns_tgt, cfg.nce_temperature)?;
    let l_lm = g.cross_entropy(v.logits, &b.labels, &b.mask, cfg.label_smoothing)?;
    let a = g.mul_const(l_ctx, w.ctx);
    let s = g.mul_const(l_sns, w.sense);
    let l = g.mul_const(l_lm, w.lm);
    let t = g.add(a, s)?;
    g.add(t, l)
}

/// Extends the model vocabulary with `n_new` freshly initialized rows.
pub fn extend_model_vocab<S: Scalar>(model: &mut AcrosModel<S>, n_new: usize, seed: u64) -> Result<()> {
    model.backbone.extend_vocab(n_new, &mut stage_rng(seed, Stage::Adaptation).fork(2))
}

/// Three-phase adaptation; the sense network (and by default the
/// contextualizer) hash is checked across the polish phase.
pub fn adapt<S: Scalar>(model: &mut AcrosModel<S>, pairs: &[ParallelPair], cfg: &AdaptConfig, seed: u64) -> Result<TrainLog> {
    cfg.validate()?;
    let mut log = TrainLog::default();
    let steps = cfg.schedule.total_steps;
    if steps == 0 {
        return Ok(log);
    }
    if pairs.len() < cfg.batch_pairs {
        return Err(Error::invalid("batch_pairs", format!("only {} pairs for batches of {}", pairs.len(), cfg.batch_pairs)));
    }
    let mut rng: RngState = stage_rng(seed, Stage::Adaptation).fork(3);
    let mut order: Vec<usize> = Vec::new();
    let mut opt = AdamW::new(cfg.optim.clone(), steps);
    let was_frozen = model.backbone.frozen;
    model.backbone.frozen = !cfg.train_backbone;
    let mut polish_hashes = None;
    let result: Result<()> = (|| {
        for step in 0..steps {
            let phase = cfg.schedule.phase(step);
            if phase == Phase::Polish && polish_hashes.is_none() {
                polish_hashes = Some((model.sense_net_hash(), model.ctx_hash()));
            }
            if order.len() < cfg.batch_pairs {
                let mut fresh: Vec<usize> = (0..pairs.len()).collect();
                rng.shuffle(&mut fresh);
                order.extend(fresh);
            }
            let idx: Vec<usize> = order.drain(..cfg.batch_pairs).collect();
            let batch: Vec<&ParallelPair> = idx.iter().map(|&i| &pairs[i]).collect();
            let b = pair_batch(&batch)?;
            let mut g = Graph::new();
            let vars = model.build(&mut g, &b.tokens, b.batch, b.seq, cfg.schedule.trainable(phase, cfg.train_backbone))?;
            let loss = adapt_loss(&mut g, &vars, &b, model.sense.k, cfg.schedule.weights_at(step), cfg)?;
            let AcrosModel { backbone, params, .. } = &mut *model;
            let value = optimizer_step(&mut opt, &g, loss, step, &mut [(BACKBONE, &mut backbone.params), ("", params)])?;
            log.losses.push(value);
        }
        Ok(())
    })();
    model.backbone.frozen = was_frozen;
    result?;
    if let Some((sn, cx)) = polish_hashes {
        if model.sense_net_hash() != sn {
            return Err(Error::Frozen("sense network changed during polish".into()));
        }
        if cfg.schedule.freeze_ctx_in_polish && model.ctx_hash() != cx {
            return Err(Error::Frozen("contextualizer changed during polish".into()));
        }
    }
    Ok(log)
}

/// Mean of source→target and target→source top-1 accuracy under cosine.
pub fn retrieval_r1(src: &[Vec<f64>], tgt: &[Vec<f64>]) -> Result<f64> {
    let n = src.len();
    if n < 2 || tgt.len() != n {
        return Err(Error::invalid("pairs", "retrieval needs n >= 2 matched rows"));
    }
    let (a, b) = (retrieval_hits(src, tgt)?, retrieval_hits(tgt, src)?);
    let rate = |h: &[bool]| h.iter().filter(|&&x| x).count() as f64 / n as f64;
    Ok(0.5 * (rate(&a) + rate(&b)))
}

/// Per-query top-1 hit vector for `queries` against `keys`; the first
/// maximum wins ties.
pub fn retrieval_hits(queries: &[Vec<f64>], keys: &[Vec<f64>]) -> Result<Vec<bool>> {
    let unit = |v: &Vec<f64>| {
        let s = norm(v);
        if s > 1e-12 {
            Ok(v.iter().map(|x| x / s).collect::<Vec<_>>())
        } else {
            Err(Error::DegenerateVector("retrieval embedding"))
        }
    };
    let ks = keys.iter().map(unit).collect::<Result<Vec<_>>>()?;
    queries
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let q = unit(q)?;
            let mut best = (0, f64::NEG_INFINITY);
            for (j, k) in ks.iter().enumerate() {
                let s = dot(&q, k);
                if s > best.1 {
                    best = (j, s);
                }
            }
            Ok(best.0 == i)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub n: usize,
    pub ctx_r1: f64,
    pub sns_r1: f64,
    /// Bidirectional hit vectors (source→target then target→source).
    pub ctx_hits: Vec<bool>,
    pub sns_hits: Vec<bool>,
    pub target_ppl: f64,
}

impl RetrievalReport {
    pub fn chance(&self) -> f64 {
        1.0 / self.n as f64
    }
}

pub fn evaluate_retrieval<S: Scalar>(model: &AcrosModel<S>, pairs: &[ParallelPair], pool_temp: f64) -> Result<RetrievalReport> {
    let emb = |f: &dyn Fn(&[usize]) -> Result<Vec<f64>>| -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let s = pairs.iter().map(|p| f(&p.source)).collect::<Result<Vec<_>>>()?;
        let t = pairs.iter().map(|p| f(&p.target)).collect::<Result<Vec<_>>>()?;
        Ok((s, t))
    };
    let (cs, ct) = emb(&|t| context_embedding(model, t))?;
    let (ss, st) = emb(&|t| sense_embedding(model, t, pool_temp))?;
    let hits = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Result<Vec<bool>> {
        let mut h = retrieval_hits(a, b)?;
        h.extend(retrieval_hits(b, a)?);
        Ok(h)
    };
    let targets: Vec<Vec<usize>> = pairs.iter().map(|p| p.target.clone()).collect();
    let v = model.backbone.config.vocab_size;
    let target_ppl = perplexity_with(|b| model.forward_batch(b)?.logits.reshape(vec![b.batch * b.seq, v]), &targets, 32)?;
    Ok(RetrievalReport {
        n: pairs.len(),
        ctx_r1: retrieval_r1(&cs, &ct)?,
        sns_r1: retrieval_r1(&ss, &st)?,
        ctx_hits: hits(&cs, &ct)?,
        sns_hits: hits(&ss, &st)?,
        target_ppl,
    })
}
