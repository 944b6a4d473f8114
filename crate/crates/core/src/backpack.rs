//! Backpack-style conversion head: the prediction state is a convex mixture
//! `h_q = Σ_k α_{q,k} v_{q,k}` of `K` sense vectors of the current token, with
//! `α_q = softmax(W_α B_q + b_α)` read from the backbone state. There is no
//! residual path back to `B_q`.

use std::path::Path;

use crate::acros::{build_sense_net, init_sense_net, token_sense_rows, SenseConfig};
use crate::base_lm::{clm_loss, lm_head, DecoderModel, BACKBONE};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::numerics::{stage_rng, AdamW, Graph, RngState, Scalar, Stage, Tensor, Var};
use crate::tokenizer::Batch;
use crate::train::{cast_params, optimizer_step, param_count, param_hash, BatchStream, ParamMap, TrainConfig, TrainLog};

pub const BP_VALUES: &str = "bp_values.";
pub const BP_WEIGHTS: &str = "bp_weights.";

const VALUE_NOISE: f64 = 0.02;

/// How the converted head is trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conversion {
    /// Continued CLM training of every parameter.
    Cpt,
    /// CLM + KD against the original backbone, backbone trainable.
    Distill,
    /// CLM + KD with the backbone frozen.
    DistillFrozen,
}

impl Conversion {
    pub const ALL: [Conversion; 3] = [Conversion::Cpt, Conversion::Distill, Conversion::DistillFrozen];

    pub fn name(self) -> &'static str {
        match self {
            Conversion::Cpt => "cpt",
            Conversion::Distill => "distill",
            Conversion::DistillFrozen => "distill-frozen",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| Error::UnknownStrategy(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConversionConfig {
    pub k: usize,
    pub mlp_scale: usize,
    pub variant: Conversion,
    /// Distillation weights (ignored by CPT).
    pub alpha: f64,
    pub tau: f64,
    pub train: TrainConfig,
}

impl Default for ConversionConfig {
    fn default() -> Self {
        Self { k: 4, mlp_scale: 4, variant: Conversion::DistillFrozen, alpha: 0.5, tau: 2.0, train: TrainConfig::default() }
    }
}

impl ConversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("backpack_k", "must be positive"));
        }
        if self.mlp_scale == 0 {
            return Err(Error::invalid("mlp_scale", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid("alpha", "must lie in [0, 1]"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid("tau", "must be positive"));
        }
        self.train.validate()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BackpackVars {
    pub hidden: Var,
    /// `[n, K·d]`.
    pub values: Var,
    /// `[n, K]`, rows on the simplex.
    pub alpha: Var,
    pub state: Var,
    pub logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackpackModel<S> {
    pub backbone: DecoderModel<S>,
    pub k: usize,
    pub mlp_scale: usize,
    /// `bp_values.*` and `bp_weights.*`.
    pub params: ParamMap<S>,
}

/// Outputs of a Backpack forward pass, rows indexed by `b·seq + q`.
#[derive(Clone, Debug, PartialEq)]
pub struct BackpackTrace<S> {
    pub alpha: Tensor<S>,
    /// `[n, K, d]`.
    pub values: Tensor<S>,
    pub state: Tensor<S>,
    pub logits: Tensor<S>,
}

impl<S: Scalar> BackpackModel<S> {
    /// Value net starts as `v_k ≈ embedding` for every slot plus noise;
    /// mixture weights start uniform.
    pub fn init(backbone: DecoderModel<S>, k: usize, mlp_scale: usize, rng: &mut RngState) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("backpack_k", "must be positive"));
        }
        let d = backbone.config.d_model;
        let sense = SenseConfig { k, mlp_scale, d };
        let mut params = init_sense_net::<S>(&sense, BP_VALUES, rng);
        // layer norm leaves roughly emb / σ_row; undo that scale in the projection
        let wte = backbone.wte().to_f64_vec();
        let rows = backbone.config.vocab_size;
        let sigma = (0..rows)
            .map(|r| {
                let row = &wte[r * d..(r + 1) * d];
                let m = row.iter().sum::<f64>() / d as f64;
                (row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / d as f64).sqrt()
            })
            .sum::<f64>()
            / rows as f64;
        let mut w_out = vec![0.0; d * k * d];
        for i in 0..d {
            for s in 0..k {
                w_out[i * k * d + s * d + i] = sigma;
            }
        }
        for w in &mut w_out {
            *w += VALUE_NOISE * sigma * rng.normal();
        }
        params.insert(format!("{BP_VALUES}w_out"), Tensor::from_f64(vec![d, k * d], &w_out)?);
        // small residual MLP so the copy dominates at step 0
        for n in ["w_in", "w_mid"] {
            let key = format!("{BP_VALUES}{n}");
            let t = params[&key].scale(S::of(0.1));
            params.insert(key, t);
        }
        params.insert(format!("{BP_WEIGHTS}w"), Tensor::zeros(&[d, k]));
        params.insert(format!("{BP_WEIGHTS}b_"), Tensor::zeros(&[k]));
        Ok(Self { backbone, k, mlp_scale, params })
    }

    pub fn hash(&self) -> String {
        param_hash(&self.params)
    }

    /// Parameters of both new networks plus the backbone.
    pub fn num_params(&self) -> usize {
        param_count(&self.params) + self.backbone.num_params()
    }

    pub fn cast<T: Scalar>(&self) -> BackpackModel<T> {
        BackpackModel { backbone: self.backbone.cast(), k: self.k, mlp_scale: self.mlp_scale, params: cast_params(&self.params) }
    }

    pub fn build(&self, g: &mut Graph<S>, tokens: &[usize], batch: usize, seq: usize, heads: bool, backbone: bool) -> Result<BackpackVars> {
        let base = self.backbone.build(g, tokens, batch, seq, backbone)?;
        let values = build_sense_net(g, &self.params, BP_VALUES, base.embeddings, heads)?;
        let w = g.param(&format!("{BP_WEIGHTS}w"), &self.params[&format!("{BP_WEIGHTS}w")], heads);
        let b = g.param(&format!("{BP_WEIGHTS}b_"), &self.params[&format!("{BP_WEIGHTS}b_")], heads);
        let a = g.matmul(base.hidden, w, false)?;
        let a = g.add_bias(a, b)?;
        let alpha = g.softmax(a)?;
        let state = g.convex_mix(alpha, values, self.k)?;
        let logits = lm_head(g, state, base.wte)?;
        Ok(BackpackVars { hidden: base.hidden, values, alpha, state, logits })
    }

    pub fn forward(&self, tokens: &[usize], batch: usize, seq: usize) -> Result<BackpackTrace<S>> {
        let mut g = Graph::new();
        let v = self.build(&mut g, tokens, batch, seq, false, false)?;
        let n = batch * seq;
        Ok(BackpackTrace {
            alpha: g.value(v.alpha).clone(),
            values: g.value(v.values).clone().reshape(vec![n, self.k, self.backbone.config.d_model])?,
            state: g.value(v.state).clone(),
            logits: g.value(v.logits).clone(),
        })
    }

    pub fn forward_batch(&self, b: &Batch) -> Result<BackpackTrace<S>> {
        self.forward(&b.tokens, b.batch, b.seq)
    }

    /// Slot value vectors for each token id, as `[ids][K][d]`.
    pub fn token_values(&self, ids: &[usize]) -> Result<Vec<Vec<Vec<f64>>>> {
        let sense = SenseConfig { k: self.k, mlp_scale: self.mlp_scale, d: self.backbone.config.d_model };
        token_sense_rows(&self.params, BP_VALUES, &sense, self.backbone.wte(), ids)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.backbone.to_checkpoint();
        ck.set_meta("kind", "backpack");
        ck.set_meta("backpack_k", self.k);
        ck.set_meta("backpack_mlp_scale", self.mlp_scale);
        ck.insert_all("", &self.params);
        ck
    }

    pub fn from_checkpoint(ck: &mut Checkpoint) -> Result<Self> {
        if ck.meta("kind")? != "backpack" {
            return Err(Error::format(format!("expected a backpack checkpoint, found {}", ck.meta("kind")?)));
        }
        let k: usize = ck.meta_parse("backpack_k")?;
        let mlp_scale: usize = ck.meta_parse("backpack_mlp_scale")?;
        let backbone = DecoderModel::<S>::from_checkpoint(ck)?;
        let reference = Self::init(backbone.clone(), k, mlp_scale, &mut RngState::new(0))?;
        let mut params = ParamMap::new();
        for (name, t) in &reference.params {
            let got: Tensor<S> = ck.tensors.remove(name).ok_or_else(|| Error::format(format!("checkpoint lacks {name}")))?.cast();
            if got.shape() != t.shape() {
                return Err(Error::format(format!("{name}: shape {:?}, expected {:?}", got.shape(), t.shape())));
            }
            params.insert(name.clone(), got);
        }
        Ok(Self { backbone, k, mlp_scale, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&mut Checkpoint::load(path)?)
    }
}

/// Converts `base` to a Backpack head and trains it under `cfg.variant`.
pub fn convert(base: &DecoderModel<f32>, stream: &[usize], cfg: &ConversionConfig, seed: u64) -> Result<(BackpackModel<f32>, TrainLog)> {
    cfg.validate()?;
    let teacher = base.clone();
    let mut backbone = base.clone();
    backbone.frozen = cfg.variant == Conversion::DistillFrozen;
    let mut model = BackpackModel::init(backbone, cfg.k, cfg.mlp_scale, &mut stage_rng(seed, Stage::Backpack))?;
    let before = model.backbone.hash();
    let mut log = TrainLog::default();
    if cfg.train.steps == 0 {
        return Ok((model, log));
    }
    let seq = cfg.train.seq_len.min(base.config.max_seq);
    let mut batches = BatchStream::new(stream.to_vec(), seq, cfg.train.batch_size, stage_rng(seed, Stage::Backpack).fork(1))?;
    let mut opt = AdamW::new(cfg.train.optim.clone(), cfg.train.steps);
    for step in 0..cfg.train.steps {
        let b = batches.next_batch()?;
        let mut g = Graph::new();
        let vars = model.build(&mut g, &b.tokens, b.batch, b.seq, true, true)?;
        let clm = g.cross_entropy(vars.logits, &b.labels, &b.mask, 0.0)?;
        let loss = match cfg.variant {
            Conversion::Cpt => clm,
            Conversion::Distill | Conversion::DistillFrozen => {
                let t = teacher.forward_batch(&b)?.logits;
                let t = t.reshape(vec![b.batch * b.seq, base.config.vocab_size])?;
                let kd = g.kl_distill(&t, vars.logits, cfg.tau, &b.mask)?;
                let c = g.mul_const(clm, cfg.alpha);
                let k = g.mul_const(kd, (1.0 - cfg.alpha) * cfg.tau * cfg.tau);
                g.add(c, k)?
            }
        };
        let BackpackModel { backbone, params, .. } = &mut model;
        let value = optimizer_step(&mut opt, &g, loss, step, &mut [(BACKBONE, &mut backbone.params), ("", params)])?;
        log.losses.push(value);
    }
    if cfg.variant == Conversion::DistillFrozen && model.backbone.hash() != before {
        return Err(Error::Frozen("backbone changed during frozen conversion".into()));
    }
    Ok((model, log))
}

pub fn convert_cpt(base: &DecoderModel<f32>, stream: &[usize], cfg: &ConversionConfig, seed: u64) -> Result<(BackpackModel<f32>, TrainLog)> {
    convert(base, stream, &ConversionConfig { variant: Conversion::Cpt, ..cfg.clone() }, seed)
}

pub fn convert_distill(
    base: &DecoderModel<f32>,
    stream: &[usize],
    cfg: &ConversionConfig,
    freeze_backbone: bool,
    seed: u64,
) -> Result<(BackpackModel<f32>, TrainLog)> {
    let variant = if freeze_backbone { Conversion::DistillFrozen } else { Conversion::Distill };
    convert(base, stream, &ConversionConfig { variant, ..cfg.clone() }, seed)
}

/// Held-out KD loss (no τ² factor) of the head against `teacher` on `batch`.
pub fn held_out_kd<S: Scalar>(model: &BackpackModel<S>, teacher: &DecoderModel<S>, b: &Batch, tau: f64) -> Result<f64> {
    let z = model.forward_batch(b)?.logits;
    let t = teacher.forward_batch(b)?.logits.reshape(vec![b.batch * b.seq, teacher.config.vocab_size])?;
    crate::acros::kd_loss(&t, &z, tau, &b.mask)
}

/// Held-out CLM loss of the head on `batch`.
pub fn held_out_clm<S: Scalar>(model: &BackpackModel<S>, b: &Batch) -> Result<f64> {
    clm_loss(&model.forward_batch(b)?.logits, &b.labels, &b.mask)
}
