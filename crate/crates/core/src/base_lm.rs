//! Pre-norm decoder-only transformer with learned positions and a tied head.

use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::numerics::kernels::log_softmax_row;
use crate::numerics::{stage_rng, AdamW, Graph, RngState, Scalar, Stage, Tensor, Var};
use crate::tokenizer::Batch;
use crate::train::{cast_params, optimizer_step, param_hash, BatchStream, ParamMap, TrainConfig, TrainLog};

/// Graph-name prefix of backbone parameters.
pub const BACKBONE: &str = "backbone.";

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub tie_head: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { n_layers: 2, d_model: 64, n_heads: 4, vocab_size: 512, max_seq: 64, tie_head: true }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ] {
            if v == 0 {
                return Err(Error::invalid(field, "must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid("n_heads", "must divide d_model"));
        }
        if !self.tie_head {
            return Err(Error::invalid("tie_head", "only tied heads are supported"));
        }
        Ok(())
    }

    fn write_meta(&self, ck: &mut Checkpoint) {
        ck.set_meta("n_layers", self.n_layers);
        ck.set_meta("d_model", self.d_model);
        ck.set_meta("n_heads", self.n_heads);
        ck.set_meta("vocab_size", self.vocab_size);
        ck.set_meta("max_seq", self.max_seq);
    }

    fn read_meta(ck: &Checkpoint) -> Result<Self> {
        let c = Self {
            n_layers: ck.meta_parse("n_layers")?,
            d_model: ck.meta_parse("d_model")?,
            n_heads: ck.meta_parse("n_heads")?,
            vocab_size: ck.meta_parse("vocab_size")?,
            max_seq: ck.meta_parse("max_seq")?,
            tie_head: true,
        };
        c.validate()?;
        Ok(c)
    }
}

/// Outputs of one backbone pass, each shaped `[batch, seq, _]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<S> {
    /// Final-layer post-norm states.
    pub hidden: Tensor<S>,
    pub logits: Tensor<S>,
    /// Input token embeddings, without positions.
    pub embeddings: Tensor<S>,
}

/// Graph handles produced by [`DecoderModel::build`].
#[derive(Clone, Copy, Debug)]
pub struct DecoderVars {
    pub hidden: Var,
    pub embeddings: Var,
    pub wte: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderModel<S> {
    pub config: DecoderConfig,
    pub params: ParamMap<S>,
    pub frozen: bool,
}

impl<S: Scalar> DecoderModel<S> {
    pub fn init(config: DecoderConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let (d, v, t) = (config.d_model, config.vocab_size, config.max_seq);
        let proj_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        let mut p = ParamMap::new();
        p.insert("wte".into(), Tensor::randn(&[v, d], INIT_STD, rng));
        p.insert("wpe".into(), Tensor::randn(&[t, d], INIT_STD, rng));
        for l in 0..config.n_layers {
            let h = |n: &str| format!("h{l}.{n}");
            for ln in ["ln1", "ln2"] {
                p.insert(h(&format!("{ln}.gamma")), Tensor::full(&[d], S::one()));
                p.insert(h(&format!("{ln}.beta")), Tensor::zeros(&[d]));
            }
            p.insert(h("attn.w_qkv"), Tensor::randn(&[d, 3 * d], INIT_STD, rng));
            p.insert(h("attn.b_qkv"), Tensor::zeros(&[3 * d]));
            p.insert(h("attn.w_o"), Tensor::randn(&[d, d], proj_std, rng));
            p.insert(h("attn.b_o"), Tensor::zeros(&[d]));
            p.insert(h("mlp.w_in"), Tensor::randn(&[d, 4 * d], INIT_STD, rng));
            p.insert(h("mlp.b_in"), Tensor::zeros(&[4 * d]));
            p.insert(h("mlp.w_out"), Tensor::randn(&[4 * d, d], proj_std, rng));
            p.insert(h("mlp.b_out"), Tensor::zeros(&[d]));
        }
        p.insert("ln_f.gamma".into(), Tensor::full(&[d], S::one()));
        p.insert("ln_f.beta".into(), Tensor::zeros(&[d]));
        Ok(Self { config, params: p, frozen: false })
    }

    pub fn hash(&self) -> String {
        param_hash(&self.params)
    }

    pub fn num_params(&self) -> usize {
        crate::train::param_count(&self.params)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn cast<T: Scalar>(&self) -> DecoderModel<T> {
        DecoderModel { config: self.config.clone(), params: cast_params(&self.params), frozen: self.frozen }
    }

    pub fn wte(&self) -> &Tensor<S> {
        &self.params["wte"]
    }

    fn check_input(&self, tokens: &[usize], batch: usize, seq: usize) -> Result<()> {
        if batch == 0 || seq == 0 || tokens.len() != batch * seq {
            return Err(Error::shape(format!("{} tokens for batch={batch} seq={seq}", tokens.len())));
        }
        if seq > self.config.max_seq {
            return Err(Error::OutOfRange(format!("sequence length {seq} exceeds max_seq {}", self.config.max_seq)));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::OutOfRange(format!("token id {bad} with vocab {}", self.config.vocab_size)));
        }
        Ok(())
    }

    /// Records the backbone into `g`, binding parameters as
    /// `backbone.<name>`; they are trainable iff `trainable` and not frozen.
    pub fn build(&self, g: &mut Graph<S>, tokens: &[usize], batch: usize, seq: usize, trainable: bool) -> Result<DecoderVars> {
        self.check_input(tokens, batch, seq)?;
        let tr = trainable && !self.frozen;
        let bind = |g: &mut Graph<S>, n: &str| g.param(&format!("{BACKBONE}{n}"), &self.params[n], tr);
        let wte = bind(g, "wte");
        let wpe = bind(g, "wpe");
        let emb = g.gather(wte, tokens)?;
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let pos = g.gather(wpe, &positions)?;
        let mut x = g.add(emb, pos)?;
        for l in 0..self.config.n_layers {
            let h = |n: &str| format!("h{l}.{n}");
            let (g1, b1) = (bind(g, &h("ln1.gamma")), bind(g, &h("ln1.beta")));
            let a_in = g.layer_norm(x, g1, b1)?;
            let (wqkv, bqkv) = (bind(g, &h("attn.w_qkv")), bind(g, &h("attn.b_qkv")));
            let qkv = g.matmul(a_in, wqkv, false)?;
            let qkv = g.add_bias(qkv, bqkv)?;
            let att = g.causal_attention(qkv, batch, seq, self.config.n_heads)?;
            let (wo, bo) = (bind(g, &h("attn.w_o")), bind(g, &h("attn.b_o")));
            let att = g.matmul(att, wo, false)?;
            let att = g.add_bias(att, bo)?;
            x = g.add(x, att)?;
            let (g2, b2) = (bind(g, &h("ln2.gamma")), bind(g, &h("ln2.beta")));
            let m_in = g.layer_norm(x, g2, b2)?;
            let (wi, bi) = (bind(g, &h("mlp.w_in")), bind(g, &h("mlp.b_in")));
            let m = g.matmul(m_in, wi, false)?;
            let m = g.add_bias(m, bi)?;
            let m = g.gelu(m);
            let (wo2, bo2) = (bind(g, &h("mlp.w_out")), bind(g, &h("mlp.b_out")));
            let m = g.matmul(m, wo2, false)?;
            let m = g.add_bias(m, bo2)?;
            x = g.add(x, m)?;
        }
        let (gf, bf) = (bind(g, "ln_f.gamma"), bind(g, "ln_f.beta"));
        let hidden = g.layer_norm(x, gf, bf)?;
        Ok(DecoderVars { hidden, embeddings: emb, wte })
    }

    pub fn forward(&self, tokens: &[usize], batch: usize, seq: usize) -> Result<ForwardTrace<S>> {
        let mut g = Graph::new();
        let v = self.build(&mut g, tokens, batch, seq, false)?;
        let logits = lm_head(&mut g, v.hidden, v.wte)?;
        let d = self.config.d_model;
        let reshape = |t: &Tensor<S>, c: usize| t.clone().reshape(vec![batch, seq, c]);
        Ok(ForwardTrace {
            hidden: reshape(g.value(v.hidden), d)?,
            logits: reshape(g.value(logits), self.config.vocab_size)?,
            embeddings: reshape(g.value(v.embeddings), d)?,
        })
    }

    pub fn forward_batch(&self, b: &Batch) -> Result<ForwardTrace<S>> {
        self.forward(&b.tokens, b.batch, b.seq)
    }

    /// Appends `n` new token rows (Gaussian init) to the embedding table.
    pub fn extend_vocab(&mut self, n: usize, rng: &mut RngState) -> Result<()> {
        let d = self.config.d_model;
        let old = &self.params["wte"];
        let mut data = old.data().to_vec();
        data.extend(Tensor::<S>::randn(&[n.max(1), d], INIT_STD, rng).data().iter().take(n * d));
        let v = self.config.vocab_size + n;
        self.params.insert("wte".into(), Tensor::new(vec![v, d], data)?);
        self.config.vocab_size = v;
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", "decoder");
        self.config.write_meta(&mut ck);
        ck.set_meta("backbone_hash", self.hash());
        ck.insert_all(BACKBONE, &self.params);
        ck
    }

    /// Reads the backbone section of any checkpoint that carries one.
    pub fn from_checkpoint(ck: &mut Checkpoint) -> Result<Self> {
        let config = DecoderConfig::read_meta(ck)?;
        let params: ParamMap<S> = ck.take_prefixed(BACKBONE);
        let reference = Self::init(config.clone(), &mut RngState::new(0))?;
        for (name, t) in &reference.params {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => return Err(Error::format(format!("{name}: shape {:?}, expected {:?}", p.shape(), t.shape()))),
                None => return Err(Error::format(format!("checkpoint lacks {BACKBONE}{name}"))),
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::format("checkpoint has unexpected backbone tensors"));
        }
        Ok(Self { config, params, frozen: false })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&mut Checkpoint::load(path)?)
    }
}

/// Tied LM head: `hidden · Wteᵀ`, no bias.
pub fn lm_head<S: Scalar>(g: &mut Graph<S>, hidden: Var, wte: Var) -> Result<Var> {
    g.matmul(hidden, wte, true)
}

/// Mean masked next-token NLL of `logits [.., V]`.
pub fn clm_loss<S: Scalar>(logits: &Tensor<S>, labels: &[usize], mask: &[bool]) -> Result<f64> {
    let (sum, count) = masked_nll(logits, labels, mask)?;
    if count == 0 {
        return Err(Error::Empty("token mask (M = 0)"));
    }
    Ok(sum / count as f64)
}

/// Sum and count of masked next-token NLL terms.
pub fn masked_nll<S: Scalar>(logits: &Tensor<S>, labels: &[usize], mask: &[bool]) -> Result<(f64, usize)> {
    let rows = logits.rows();
    if labels.len() != rows || mask.len() != rows {
        return Err(Error::shape(format!("{rows} logit rows, {} labels, {} mask entries", labels.len(), mask.len())));
    }
    let v = logits.cols();
    let mut sum = 0.0;
    let mut count = 0;
    for r in 0..rows {
        if !mask[r] {
            continue;
        }
        if labels[r] >= v {
            return Err(Error::OutOfRange(format!("label {} with vocab {v}", labels[r])));
        }
        sum -= log_softmax_row(logits.row(r), 1.0)[labels[r]];
        count += 1;
    }
    Ok((sum, count))
}

/// CLM pretraining from scratch on a token stream.
pub fn train_base(
    config: DecoderConfig,
    stream: &[usize],
    hp: &TrainConfig,
    seed: u64,
) -> Result<(DecoderModel<f32>, TrainLog)> {
    hp.validate()?;
    let mut model = DecoderModel::<f32>::init(config, &mut stage_rng(seed, Stage::BaseInit))?;
    let log = continue_training(&mut model, stream, hp, seed)?;
    Ok((model, log))
}

/// Further CLM steps on an existing, unfrozen model.
pub fn continue_training<S: Scalar>(
    model: &mut DecoderModel<S>,
    stream: &[usize],
    hp: &TrainConfig,
    seed: u64,
) -> Result<TrainLog> {
    if model.frozen {
        return Err(Error::Frozen("backbone".into()));
    }
    let mut log = TrainLog::default();
    if hp.steps == 0 {
        return Ok(log);
    }
    let seq = hp.seq_len.min(model.config.max_seq);
    let mut batches = BatchStream::new(stream.to_vec(), seq, hp.batch_size, stage_rng(seed, Stage::BaseTrain))?;
    let mut opt = AdamW::new(hp.optim.clone(), hp.steps);
    for step in 0..hp.steps {
        let b = batches.next_batch()?;
        let mut g = Graph::new();
        let v = model.build(&mut g, &b.tokens, b.batch, b.seq, true)?;
        let logits = lm_head(&mut g, v.hidden, v.wte)?;
        let loss = g.cross_entropy(logits, &b.labels, &b.mask, 0.0)?;
        let value = optimizer_step(&mut opt, &g, loss, step, &mut [(BACKBONE, &mut model.params)])?;
        log.losses.push(value);
    }
    Ok(log)
}

/// Sentences per scoring pass in [`perplexity`]; does not affect the result.
pub const SCORE_CHUNK: usize = 32;

/// Total NLL and scored-token count for each sentence scored on its own.
pub fn sentence_nll<S: Scalar>(
    score: impl Fn(&Batch) -> Result<Tensor<S>>,
    sentences: &[Vec<usize>],
    chunk: usize,
) -> Result<Vec<(f64, usize)>> {
    let mut out = Vec::with_capacity(sentences.len());
    for group in sentences.chunks(chunk.max(1)) {
        let b = Batch::from_sequences(group)?;
        let logits = score(&b)?;
        let v = logits.cols();
        for i in 0..b.batch {
            let span = i * b.seq..(i + 1) * b.seq;
            let rows = Tensor::new(vec![b.seq, v], logits.data()[span.start * v..span.end * v].to_vec())?;
            out.push(masked_nll(&rows, &b.labels[span.clone()], &b.mask[span])?);
        }
    }
    Ok(out)
}

/// `exp` of the token-weighted mean NLL over sentences, each scored
/// independently (callers prepend BOS).
pub fn perplexity_with<S: Scalar>(
    score: impl Fn(&Batch) -> Result<Tensor<S>>,
    sentences: &[Vec<usize>],
    chunk: usize,
) -> Result<f64> {
    let per = sentence_nll(score, sentences, chunk)?;
    let (sum, count) = per.iter().fold((0.0, 0usize), |(s, c), &(a, b)| (s + a, c + b));
    if count == 0 {
        return Err(Error::Empty("scored tokens"));
    }
    Ok((sum / count as f64).exp())
}

pub fn perplexity<S: Scalar>(model: &DecoderModel<S>, sentences: &[Vec<usize>]) -> Result<f64> {
    perplexity_chunked(model, sentences, SCORE_CHUNK)
}

pub fn perplexity_chunked<S: Scalar>(model: &DecoderModel<S>, sentences: &[Vec<usize>], chunk: usize) -> Result<f64> {
    perplexity_with(|b| Ok(model.forward_batch(b)?.logits), sentences, chunk)
}
