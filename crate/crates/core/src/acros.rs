//! Gated residual sense pathway over a frozen decoder.
//!
//! Each token embedding is mapped by a small residual MLP to `K` sense
//! vectors `E_{k,j}`. Per-slot causal attention over the frozen final hidden
//! states gives weights `C_{k,q,j}`, and the mixture
//! `M_q = Σ_k Σ_{j≤q} C_{k,q,j} E_{k,j}` is added to the base state as
//! `H_q = B_q + g·M_q` before the tied head. The gate starts at zero, so an
//! untrained pathway reproduces the backbone exactly.

use std::path::Path;

use crate::base_lm::{lm_head, DecoderModel, DecoderVars};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::numerics::kernels::{dot, norm};
use crate::numerics::{stage_rng, AdamW, Graph, RngState, Scalar, Stage, Tensor, Var};
use crate::tokenizer::Batch;
use crate::train::{cast_params, optimizer_step, param_hash, BatchStream, ParamMap, TrainConfig, TrainLog};

pub const SENSE_NET: &str = "sense_net.";
pub const CTX: &str = "ctx.";
pub const GATE: &str = "gate";

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SenseConfig {
    pub k: usize,
    pub mlp_scale: usize,
    pub d: usize,
}

impl SenseConfig {
    pub fn new(k: usize, d: usize) -> Self {
        Self { k, mlp_scale: 4, d }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::invalid("k", "must be at least 2"));
        }
        if self.mlp_scale == 0 {
            return Err(Error::invalid("mlp_scale", "must be positive"));
        }
        if self.d == 0 || self.d % self.k != 0 {
            return Err(Error::invalid("k", format!("must divide the hidden size {}", self.d)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.k
    }
}

/// Sense-network parameters (`sense_net.*` names) for `k` slots.
///
/// Shared with the Backpack value network, which uses the same machinery
/// under a different prefix.
pub fn init_sense_net<S: Scalar>(cfg: &SenseConfig, prefix: &str, rng: &mut RngState) -> ParamMap<S> {
    let (d, h, k) = (cfg.d, cfg.mlp_scale * cfg.d, cfg.k);
    let mut p = ParamMap::new();
    p.insert(format!("{prefix}w_in"), Tensor::randn(&[d, h], INIT_STD, rng));
    p.insert(format!("{prefix}b_in"), Tensor::zeros(&[h]));
    p.insert(format!("{prefix}w_mid"), Tensor::randn(&[h, d], INIT_STD, rng));
    p.insert(format!("{prefix}b_mid"), Tensor::zeros(&[d]));
    p.insert(format!("{prefix}ln.gamma"), Tensor::full(&[d], S::one()));
    p.insert(format!("{prefix}ln.beta"), Tensor::zeros(&[d]));
    p.insert(format!("{prefix}w_out"), Tensor::randn(&[d, k * d], INIT_STD, rng));
    p.insert(format!("{prefix}b_out"), Tensor::zeros(&[k * d]));
    p
}

/// Records the sense network on `emb [n, d]`; returns `E [n, K·d]`.
pub fn build_sense_net<S: Scalar>(
    g: &mut Graph<S>,
    params: &ParamMap<S>,
    prefix: &str,
    emb: Var,
    trainable: bool,
) -> Result<Var> {
    let bind = |g: &mut Graph<S>, n: &str| {
        let name = format!("{prefix}{n}");
        let t = params.get(&name).ok_or_else(|| Error::Graph(format!("missing parameter {name}")))?;
        Ok::<_, Error>(g.param(&name, t, trainable))
    };
    let (w_in, b_in) = (bind(g, "w_in")?, bind(g, "b_in")?);
    let x = g.matmul(emb, w_in, false)?;
    let x = g.add_bias(x, b_in)?;
    let x = g.gelu(x);
    let (w_mid, b_mid) = (bind(g, "w_mid")?, bind(g, "b_mid")?);
    let x = g.matmul(x, w_mid, false)?;
    let x = g.add_bias(x, b_mid)?;
    let x = g.add(x, emb)?;
    let (gamma, beta) = (bind(g, "ln.gamma")?, bind(g, "ln.beta")?);
    let x = g.layer_norm(x, gamma, beta)?;
    let (w_out, b_out) = (bind(g, "w_out")?, bind(g, "b_out")?);
    let e = g.matmul(x, w_out, false)?;
    g.add_bias(e, b_out)
}

/// Which parameter groups receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub backbone: bool,
    pub sense_net: bool,
    pub ctx: bool,
    pub gate: bool,
}

impl Trainable {
    pub const NONE: Self = Self { backbone: false, sense_net: false, ctx: false, gate: false };
    /// The induction set: everything except the backbone.
    pub const PATHWAY: Self = Self { backbone: false, sense_net: true, ctx: true, gate: true };
}

/// Graph handles produced by [`AcrosModel::build`].
#[derive(Clone, Copy, Debug)]
pub struct AcrosVars {
    pub base: DecoderVars,
    /// `[n, K·d]`, slot-major within each row.
    pub e: Var,
    /// `[batch, K, seq, seq]`.
    pub c: Var,
    /// Per-slot contributions `[n, K·d]`.
    pub u: Var,
    pub m: Var,
    pub h: Var,
    pub logits: Var,
    /// Backbone logits (the `g = 0` teacher).
    pub base_logits: Var,
    pub gate: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcrosModel<S> {
    pub backbone: DecoderModel<S>,
    pub sense: SenseConfig,
    /// `sense_net.*`, `ctx.*` and `gate`.
    pub params: ParamMap<S>,
}

/// Everything one forward pass computes, for measurement and steering.
#[derive(Clone, Debug, PartialEq)]
pub struct AcrosTrace<S> {
    pub batch: usize,
    pub seq: usize,
    pub k: usize,
    pub d: usize,
    /// `[batch, seq, d]`.
    pub hidden: Tensor<S>,
    pub base_logits: Tensor<S>,
    /// `[batch, seq, K, d]`.
    pub e: Tensor<S>,
    /// `[batch, K, seq, seq]`.
    pub c: Tensor<S>,
    /// `[batch, seq, K, d]`.
    pub u: Tensor<S>,
    pub m: Tensor<S>,
    pub h: Tensor<S>,
    pub logits: Tensor<S>,
    pub gate: f64,
}

impl<S: Scalar> AcrosTrace<S> {
    /// `E_{k,j}` for batch row `b`.
    pub fn e_vec(&self, b: usize, k: usize, j: usize) -> &[S] {
        let o = ((b * self.seq + j) * self.k + k) * self.d;
        &self.e.data()[o..o + self.d]
    }

    pub fn c_at(&self, b: usize, k: usize, q: usize, j: usize) -> f64 {
        self.c.data()[((b * self.k + k) * self.seq + q) * self.seq + j].as_f64()
    }

    /// Slot-`k` contribution `Σ_j C_{k,q,j} E_{k,j}` at position `q`.
    pub fn u_vec(&self, b: usize, k: usize, q: usize) -> &[S] {
        let o = ((b * self.seq + q) * self.k + k) * self.d;
        &self.u.data()[o..o + self.d]
    }

    pub fn row(&self, t: &Tensor<S>, b: usize, q: usize) -> Vec<f64> {
        t.row(b * self.seq + q).iter().map(|x| x.as_f64()).collect()
    }
}

impl<S: Scalar> AcrosModel<S> {
    /// Wraps `backbone` (which is frozen) with a fresh pathway; gate = 0.
    pub fn new(mut backbone: DecoderModel<S>, sense: SenseConfig, rng: &mut RngState) -> Result<Self> {
        sense.validate()?;
        if sense.d != backbone.config.d_model {
            return Err(Error::invalid("d", "sense width must equal the backbone hidden size"));
        }
        backbone.freeze();
        let d = sense.d;
        let mut params = init_sense_net(&sense, SENSE_NET, rng);
        params.insert(format!("{CTX}w_qk"), Tensor::randn(&[d, 2 * d], INIT_STD, rng));
        params.insert(format!("{CTX}b_qk"), Tensor::zeros(&[2 * d]));
        params.insert(GATE.into(), Tensor::scalar(S::zero()));
        Ok(Self { backbone, sense, params })
    }

    pub fn gate(&self) -> f64 {
        self.params[GATE].data()[0].as_f64()
    }

    pub fn set_gate(&mut self, g: f64) {
        self.params.get_mut(GATE).expect("gate").data_mut()[0] = S::of(g);
    }

    pub fn pathway_hash(&self) -> String {
        param_hash(&self.params)
    }

    /// Hash of the `sense_net.*` parameters only.
    pub fn sense_net_hash(&self) -> String {
        param_hash(&self.params.iter().filter(|(k, _)| k.starts_with(SENSE_NET)).map(|(k, v)| (k.clone(), v.clone())).collect())
    }

    pub fn ctx_hash(&self) -> String {
        param_hash(&self.params.iter().filter(|(k, _)| k.starts_with(CTX)).map(|(k, v)| (k.clone(), v.clone())).collect())
    }

    pub fn cast<T: Scalar>(&self) -> AcrosModel<T> {
        AcrosModel { backbone: self.backbone.cast(), sense: self.sense.clone(), params: cast_params(&self.params) }
    }

    pub fn build(&self, g: &mut Graph<S>, tokens: &[usize], batch: usize, seq: usize, tr: Trainable) -> Result<AcrosVars> {
        let k = self.sense.k;
        let base = self.backbone.build(g, tokens, batch, seq, tr.backbone)?;
        let e = build_sense_net(g, &self.params, SENSE_NET, base.embeddings, tr.sense_net)?;
        let w_qk = g.param(&format!("{CTX}w_qk"), &self.params[&format!("{CTX}w_qk")], tr.ctx);
        let b_qk = g.param(&format!("{CTX}b_qk"), &self.params[&format!("{CTX}b_qk")], tr.ctx);
        let qk = g.matmul(base.hidden, w_qk, false)?;
        let qk = g.add_bias(qk, b_qk)?;
        let c = g.sense_context(qk, batch, seq, k)?;
        let u = g.slot_contrib(c, e, batch, seq, k)?;
        let m = g.sum_slots(u, k)?;
        let gate = g.param(GATE, &self.params[GATE], tr.gate);
        let gm = g.scale(m, gate)?;
        let h = g.add(base.hidden, gm)?;
        let logits = lm_head(g, h, base.wte)?;
        let base_logits = lm_head(g, base.hidden, base.wte)?;
        Ok(AcrosVars { base, e, c, u, m, h, logits, base_logits, gate })
    }

    pub fn forward(&self, tokens: &[usize], batch: usize, seq: usize) -> Result<AcrosTrace<S>> {
        let mut g = Graph::new();
        let v = self.build(&mut g, tokens, batch, seq, Trainable::NONE)?;
        let (k, d, vocab) = (self.sense.k, self.sense.d, self.backbone.config.vocab_size);
        let shaped = |var: Var, dims: Vec<usize>| g.value(var).clone().reshape(dims);
        Ok(AcrosTrace {
            batch,
            seq,
            k,
            d,
            hidden: shaped(v.base.hidden, vec![batch, seq, d])?,
            base_logits: shaped(v.base_logits, vec![batch, seq, vocab])?,
            e: shaped(v.e, vec![batch, seq, k, d])?,
            c: g.value(v.c).clone(),
            u: shaped(v.u, vec![batch, seq, k, d])?,
            m: shaped(v.m, vec![batch, seq, d])?,
            h: shaped(v.h, vec![batch, seq, d])?,
            logits: shaped(v.logits, vec![batch, seq, vocab])?,
            gate: self.gate(),
        })
    }

    pub fn forward_batch(&self, b: &Batch) -> Result<AcrosTrace<S>> {
        self.forward(&b.tokens, b.batch, b.seq)
    }

    /// `E` for input embeddings `[n, d]`, as `[n, K, d]`.
    pub fn sense_vectors(&self, embeddings: &Tensor<S>) -> Result<Tensor<S>> {
        let d = self.sense.d;
        if embeddings.cols() != d {
            return Err(Error::shape(format!("embeddings have width {}, expected {d}", embeddings.cols())));
        }
        let n = embeddings.rows();
        let mut g = Graph::new();
        let x = g.constant(embeddings.clone().reshape(vec![n, d])?);
        let e = build_sense_net(&mut g, &self.params, SENSE_NET, x, false)?;
        g.value(e).clone().reshape(vec![n, self.sense.k, d])
    }

    /// `C [batch, K, seq, seq]` for base states `[batch, seq, d]`.
    pub fn contextualize(&self, hidden: &Tensor<S>) -> Result<Tensor<S>> {
        let [batch, seq, d] = hidden.shape() else {
            return Err(Error::shape("contextualize expects [batch, seq, d]"));
        };
        if *d != self.sense.d {
            return Err(Error::shape("hidden width mismatch"));
        }
        let mut g = Graph::new();
        let x = g.constant(hidden.clone());
        let w = g.constant(self.params[&format!("{CTX}w_qk")].clone());
        let b = g.constant(self.params[&format!("{CTX}b_qk")].clone());
        let qk = g.matmul(x, w, false)?;
        let qk = g.add_bias(qk, b)?;
        let c = g.sense_context(qk, *batch, *seq, self.sense.k)?;
        Ok(g.value(c).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.backbone.to_checkpoint();
        ck.set_meta("kind", "acros");
        ck.set_meta("sense_k", self.sense.k);
        ck.set_meta("sense_mlp_scale", self.sense.mlp_scale);
        ck.insert_all("", &self.params);
        ck
    }

    pub fn from_checkpoint(ck: &mut Checkpoint) -> Result<Self> {
        if ck.meta("kind")? != "acros" {
            return Err(Error::format(format!("expected an acros checkpoint, found {}", ck.meta("kind")?)));
        }
        let recorded = ck.meta("backbone_hash")?.to_string();
        let sense_k: usize = ck.meta_parse("sense_k")?;
        let mlp_scale: usize = ck.meta_parse("sense_mlp_scale")?;
        let mut backbone = DecoderModel::<S>::from_checkpoint(ck)?;
        if backbone.hash() != recorded {
            return Err(Error::format("backbone does not match the recorded backbone hash"));
        }
        backbone.freeze();
        let sense = SenseConfig { k: sense_k, mlp_scale, d: backbone.config.d_model };
        let reference = Self::new(backbone.clone(), sense.clone(), &mut RngState::new(0))?;
        let mut params = ParamMap::new();
        for (name, t) in &reference.params {
            let got: Tensor<S> = ck.tensors.remove(name).ok_or_else(|| Error::format(format!("checkpoint lacks {name}")))?.cast();
            if got.shape() != t.shape() {
                return Err(Error::format(format!("{name}: shape {:?}, expected {:?}", got.shape(), t.shape())));
            }
            params.insert(name.clone(), got);
        }
        Ok(Self { backbone, sense, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&mut Checkpoint::load(path)?)
    }
}

/// `M = Σ_k Σ_{j≤q} C_{k,q,j} E_{k,j}` for `C [batch, K, seq, seq]` and
/// `E [batch, seq, K, d]`; returns `[batch, seq, d]`.
pub fn sense_mixture<S: Scalar>(c: &Tensor<S>, e: &Tensor<S>) -> Result<Tensor<S>> {
    let [batch, k, seq, seq2] = c.shape() else {
        return Err(Error::shape("C must be [batch, K, seq, seq]"));
    };
    let [eb, es, ek, d] = e.shape() else {
        return Err(Error::shape("E must be [batch, seq, K, d]"));
    };
    if seq != seq2 || eb != batch || es != seq || ek != k {
        return Err(Error::shape(format!("C {:?} vs E {:?}", c.shape(), e.shape())));
    }
    let (batch, k, seq, d) = (*batch, *k, *seq, *d);
    let mut out = vec![0.0; batch * seq * d];
    for b in 0..batch {
        for q in 0..seq {
            let o = &mut out[(b * seq + q) * d..(b * seq + q + 1) * d];
            for s in 0..k {
                for j in 0..seq {
                    let w = c.data()[((b * k + s) * seq + q) * seq + j].as_f64();
                    if w == 0.0 {
                        continue;
                    }
                    let ev = &e.data()[((b * seq + j) * k + s) * d..((b * seq + j) * k + s + 1) * d];
                    for (x, y) in o.iter_mut().zip(ev) {
                        *x += w * y.as_f64();
                    }
                }
            }
        }
    }
    Tensor::from_f64(vec![batch, seq, d], &out)
}

/// Induction objective weights.
#[derive(Clone, Debug, PartialEq)]
pub struct InductionConfig {
    pub alpha: f64,
    pub tau: f64,
    pub lambda_div: f64,
    pub train: TrainConfig,
}

impl Default for InductionConfig {
    fn default() -> Self {
        Self { alpha: 0.5, tau: 2.0, lambda_div: 0.005, train: TrainConfig::default() }
    }
}

impl InductionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid("alpha", "must lie in [0, 1]"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid("tau", "must be positive"));
        }
        if !(self.lambda_div >= 0.0 && self.lambda_div.is_finite()) {
            return Err(Error::invalid("lambda_div", "must be nonnegative"));
        }
        self.train.validate()
    }
}

/// Records `α·CLM + (1−α)·τ²·KD + λ·div` over `vars` into `g`.
pub fn build_induction_loss<S: Scalar>(
    g: &mut Graph<S>,
    vars: &AcrosVars,
    k: usize,
    labels: &[usize],
    mask: &[bool],
    cfg: &InductionConfig,
) -> Result<Var> {
    let teacher = g.value(vars.base_logits).clone();
    let clm = g.cross_entropy(vars.logits, labels, mask, 0.0)?;
    let kd = g.kl_distill(&teacher, vars.logits, cfg.tau, mask)?;
    let clm_w = g.mul_const(clm, cfg.alpha);
    let kd_w = g.mul_const(kd, (1.0 - cfg.alpha) * cfg.tau * cfg.tau);
    let mut total = g.add(clm_w, kd_w)?;
    if cfg.lambda_div > 0.0 && k >= 2 {
        let div = g.diversity(vars.e, k, mask)?;
        let div_w = g.mul_const(div, cfg.lambda_div);
        total = g.add(total, div_w)?;
    }
    Ok(total)
}

/// `(1/M) Σ_t m_t KL(softmax(z^T_t/τ) ‖ softmax(z^S_t/τ))`, without the τ² factor.
pub fn kd_loss<S: Scalar>(teacher: &Tensor<S>, student: &Tensor<S>, tau: f64, mask: &[bool]) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(student.clone());
    let l = g.kl_distill(teacher, s, tau, mask)?;
    Ok(g.value(l).data()[0].as_f64())
}

/// Mean squared off-diagonal slot cosine for `E [n, K, d]` (or `[n, K·d]`).
pub fn diversity_loss<S: Scalar>(e: &Tensor<S>, k: usize, mask: &[bool]) -> Result<f64> {
    let n = mask.len();
    if n == 0 || e.numel() % n != 0 {
        return Err(Error::shape("diversity: one mask entry per token"));
    }
    let mut g = Graph::new();
    let x = g.constant(e.clone().reshape(vec![n, e.numel() / n])?);
    let l = g.diversity(x, k, mask)?;
    Ok(g.value(l).data()[0].as_f64())
}

/// Full induction objective on precomputed logits and sense vectors.
pub fn induction_loss<S: Scalar>(
    teacher: &Tensor<S>,
    student: &Tensor<S>,
    e: &Tensor<S>,
    k: usize,
    labels: &[usize],
    mask: &[bool],
    cfg: &InductionConfig,
) -> Result<f64> {
    let clm = crate::base_lm::clm_loss(student, labels, mask)?;
    let kd = kd_loss(teacher, student, cfg.tau, mask)?;
    let div = if cfg.lambda_div > 0.0 { diversity_loss(e, k, mask)? } else { 0.0 };
    Ok(cfg.alpha * clm + (1.0 - cfg.alpha) * cfg.tau * cfg.tau * kd + cfg.lambda_div * div)
}

/// Trains the sense network, contextualizer and gate against the frozen
/// backbone. The backbone hash is checked before and after.
pub fn train_induction<S: Scalar>(
    model: &mut AcrosModel<S>,
    stream: &[usize],
    cfg: &InductionConfig,
    seed: u64,
) -> Result<TrainLog> {
    cfg.validate()?;
    let before = model.backbone.hash();
    let mut log = TrainLog::default();
    if cfg.train.steps == 0 {
        return Ok(log);
    }
    let seq = cfg.train.seq_len.min(model.backbone.config.max_seq);
    let mut batches = BatchStream::new(stream.to_vec(), seq, cfg.train.batch_size, stage_rng(seed, Stage::Induction))?;
    let mut opt = AdamW::new(cfg.train.optim.clone(), cfg.train.steps);
    for step in 0..cfg.train.steps {
        let b = batches.next_batch()?;
        let mut g = Graph::new();
        let vars = model.build(&mut g, &b.tokens, b.batch, b.seq, Trainable::PATHWAY)?;
        let loss = build_induction_loss(&mut g, &vars, model.sense.k, &b.labels, &b.mask, cfg)?;
        let value = optimizer_step(&mut opt, &g, loss, step, &mut [("", &mut model.params)])?;
        log.losses.push(value);
    }
    if model.backbone.hash() != before {
        return Err(Error::Frozen("backbone changed during induction".into()));
    }
    Ok(log)
}

/// Mean over masked positions of `‖g·M_q‖ / ‖B_q‖`, in percent.
pub fn contribution_ratio<S: Scalar>(trace: &AcrosTrace<S>, mask: &[bool]) -> Result<f64> {
    let n = trace.batch * trace.seq;
    if mask.len() != n {
        return Err(Error::shape("contribution_ratio: mask length"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let b: Vec<f64> = trace.hidden.row(r).iter().map(|x| x.as_f64()).collect();
        let m: Vec<f64> = trace.m.row(r).iter().map(|x| x.as_f64()).collect();
        let nb = norm(&b);
        if nb < 1e-12 {
            return Err(Error::DegenerateVector("base hidden state"));
        }
        sum += trace.gate.abs() * norm(&m) / nb;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Empty("token mask (M = 0)"));
    }
    Ok(100.0 * sum / count as f64)
}

/// Mean over rows of the mean off-diagonal cosine among `K` slot vectors.
pub fn sense_separation(e: &[Vec<Vec<f64>>]) -> Result<f64> {
    if e.is_empty() {
        return Err(Error::Empty("sense separation sample"));
    }
    let mut total = 0.0;
    for slots in e {
        let k = slots.len();
        if k < 2 {
            return Err(Error::invalid("k", "sense separation needs at least two slots"));
        }
        let mut s = 0.0;
        for a in 0..k {
            for b in 0..k {
                if a != b {
                    let (na, nb) = (norm(&slots[a]), norm(&slots[b]));
                    if na < 1e-12 || nb < 1e-12 {
                        return Err(Error::DegenerateVector("sense vector"));
                    }
                    s += (dot(&slots[a], &slots[b]) / (na * nb)).clamp(-1.0, 1.0);
                }
            }
        }
        total += s / (k * (k - 1)) as f64;
    }
    Ok(total / e.len() as f64)
}

/// Per-token sense vectors of an ACROS model for the given token ids.
pub fn token_sense_vectors<S: Scalar>(model: &AcrosModel<S>, ids: &[usize]) -> Result<Vec<Vec<Vec<f64>>>> {
    token_sense_rows(&model.params, SENSE_NET, &model.sense, model.backbone.wte(), ids)
}

/// Runs the sense network under `prefix` on rows of `wte`; `[ids][K][d]`.
pub(crate) fn token_sense_rows<S: Scalar>(
    params: &ParamMap<S>,
    prefix: &str,
    cfg: &SenseConfig,
    wte: &Tensor<S>,
    ids: &[usize],
) -> Result<Vec<Vec<Vec<f64>>>> {
    let (d, k) = (cfg.d, cfg.k);
    if ids.is_empty() {
        return Err(Error::Empty("token ids"));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= wte.rows()) {
        return Err(Error::OutOfRange(format!("token id {bad}")));
    }
    let rows: Vec<S> = ids.iter().flat_map(|&i| wte.row(i).to_vec()).collect();
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![ids.len(), d], rows)?);
    let e = build_sense_net(&mut g, params, prefix, x, false)?;
    let e = g.value(e);
    Ok((0..ids.len())
        .map(|i| (0..k).map(|s| e.data()[(i * k + s) * d..(i * k + s + 1) * d].iter().map(|x| x.as_f64()).collect()).collect())
        .collect())
}
