//! Experiment configuration: a TOML file with one table per pipeline stage.
//!
//! Every key has a default, unknown keys are rejected, and [`ExperimentConfig::validate`]
//! reports the first bad field as `section.key`.

use std::path::{Path, PathBuf};

use acros_core::acros::{InductionConfig, SenseConfig};
use acros_core::alignment::{AdaptConfig, AdaptSchedule, PhaseWeights};
use acros_core::backpack::{Conversion, ConversionConfig};
use acros_core::base_lm::DecoderConfig;
use acros_core::diagnostics::{BOOTSTRAP_RESAMPLES, BOOTSTRAP_SEED};
use acros_core::error::Error as CoreError;
use acros_core::numerics::AdamWConfig;
use acros_core::steering::{DEFAULT_BOOST, DEFAULT_SELF_TOP_N};
use acros_core::synth::SynthConfig;
use acros_core::train::TrainConfig;
use acros_core::wsd::ActivationKind;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub base: BaseSection,
    pub induction: InductionSection,
    pub backpack: BackpackSection,
    pub svd: SvdSection,
    pub wsd: WsdSection,
    pub steering: SteeringSection,
    pub adaptation: AdaptationSection,
    pub paths: PathsSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Root seed; every stage forks its own stream from it.
    pub seed: u64,
    pub bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 1, bootstrap_resamples: BOOTSTRAP_RESAMPLES, bootstrap_seed: BOOTSTRAP_SEED }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n_topics: usize,
    pub nouns: usize,
    pub verbs: usize,
    pub adjectives: usize,
    pub n_homographs: usize,
    pub homograph_rate: f64,
    pub cast_size: usize,
    pub cast_rate: f64,
    pub train_docs: usize,
    pub heldout_docs: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
    pub wsd_per_sense: usize,
    pub wsd_single: usize,
    pub steer_contexts: usize,
    pub cipher_train: usize,
    pub cipher_heldout: usize,
    pub vocab_max: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            n_topics: s.n_topics,
            nouns: s.nouns,
            verbs: s.verbs,
            adjectives: s.adjectives,
            n_homographs: s.n_homographs,
            homograph_rate: s.homograph_rate,
            cast_size: s.cast_size,
            cast_rate: s.cast_rate,
            train_docs: s.train_docs,
            heldout_docs: s.heldout_docs,
            min_sentences: s.min_sentences,
            max_sentences: s.max_sentences,
            wsd_per_sense: s.wsd_per_sense,
            wsd_single: s.wsd_single,
            steer_contexts: s.steer_contexts,
            cipher_train: s.cipher_train,
            cipher_heldout: s.cipher_heldout,
            vocab_max: 512,
        }
    }
}

impl DataSection {
    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            n_topics: self.n_topics,
            nouns: self.nouns,
            verbs: self.verbs,
            adjectives: self.adjectives,
            n_homographs: self.n_homographs,
            homograph_rate: self.homograph_rate,
            cast_size: self.cast_size,
            cast_rate: self.cast_rate,
            train_docs: self.train_docs,
            heldout_docs: self.heldout_docs,
            min_sentences: self.min_sentences,
            max_sentences: self.max_sentences,
            wsd_per_sense: self.wsd_per_sense,
            wsd_single: self.wsd_single,
            steer_contexts: self.steer_contexts,
            cipher_train: self.cipher_train,
            cipher_heldout: self.cipher_heldout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub max_seq: usize,
    /// Sense slots of the residual pathway.
    pub k: usize,
    pub mlp_scale: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { n_layers: 2, d_model: 64, n_heads: 4, max_seq: 64, k: 8, mlp_scale: 4 }
    }
}

impl ModelSection {
    pub fn decoder(&self, vocab_size: usize) -> DecoderConfig {
        DecoderConfig { n_layers: self.n_layers, d_model: self.d_model, n_heads: self.n_heads, vocab_size, max_seq: self.max_seq, tie_head: true }
    }

    pub fn sense(&self) -> SenseConfig {
        SenseConfig { k: self.k, mlp_scale: self.mlp_scale, d: self.d_model }
    }
}

fn optim(lr: f64, warmup_ratio: f64, weight_decay: f64) -> AdamWConfig {
    AdamWConfig { lr, warmup_ratio, weight_decay, ..AdamWConfig::default() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseSection {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
}

impl Default for BaseSection {
    fn default() -> Self {
        Self { steps: 800, batch_size: 16, seq_len: 32, lr: 3e-3, warmup_ratio: 0.02, weight_decay: 0.1 }
    }
}

impl BaseSection {
    pub fn train(&self) -> TrainConfig {
        TrainConfig { steps: self.steps, batch_size: self.batch_size, seq_len: self.seq_len, optim: optim(self.lr, self.warmup_ratio, self.weight_decay) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InductionSection {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub tau: f64,
    pub lambda_div: f64,
}

impl Default for InductionSection {
    fn default() -> Self {
        let d = InductionConfig::default();
        Self { steps: 200, batch_size: 16, seq_len: 32, lr: 3e-3, warmup_ratio: 0.02, weight_decay: 0.1, alpha: d.alpha, tau: d.tau, lambda_div: d.lambda_div }
    }
}

impl InductionSection {
    pub fn core(&self) -> InductionConfig {
        InductionConfig {
            alpha: self.alpha,
            tau: self.tau,
            lambda_div: self.lambda_div,
            train: TrainConfig { steps: self.steps, batch_size: self.batch_size, seq_len: self.seq_len, optim: optim(self.lr, self.warmup_ratio, self.weight_decay) },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackpackSection {
    pub k: usize,
    pub mlp_scale: usize,
    pub variants: Vec<String>,
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub tau: f64,
}

impl Default for BackpackSection {
    fn default() -> Self {
        Self {
            k: 4,
            mlp_scale: 4,
            variants: Conversion::ALL.iter().map(|c| c.name().to_string()).collect(),
            steps: 200,
            batch_size: 16,
            seq_len: 32,
            lr: 3e-3,
            warmup_ratio: 0.02,
            weight_decay: 0.1,
            alpha: 0.5,
            tau: 2.0,
        }
    }
}

impl BackpackSection {
    /// Parsed variants; call after validation.
    pub fn conversions(&self) -> Vec<Conversion> {
        self.variants.iter().filter_map(|v| Conversion::parse(v).ok()).collect()
    }

    pub fn core(&self, variant: Conversion) -> ConversionConfig {
        ConversionConfig {
            k: self.k,
            mlp_scale: self.mlp_scale,
            variant,
            alpha: self.alpha,
            tau: self.tau,
            train: TrainConfig { steps: self.steps, batch_size: self.batch_size, seq_len: self.seq_len, optim: optim(self.lr, self.warmup_ratio, self.weight_decay) },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvdSection {
    /// Hidden states sampled from held-out positions.
    pub samples: usize,
    pub thresholds: Vec<f64>,
    pub k_marks: Vec<usize>,
}

impl Default for SvdSection {
    fn default() -> Self {
        Self { samples: 2000, thresholds: vec![0.9, 0.95, 0.99], k_marks: vec![4, 8, 32] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WsdSection {
    /// Headline activation; the other kind is reported alongside it.
    pub activation: String,
}

impl Default for WsdSection {
    fn default() -> Self {
        Self { activation: ActivationKind::AttentionMass.name().to_string() }
    }
}

impl WsdSection {
    pub fn kind(&self) -> ActivationKind {
        ActivationKind::parse(&self.activation).unwrap_or(ActivationKind::AttentionMass)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteeringSection {
    pub boost: f64,
    pub self_top_n: usize,
}

impl Default for SteeringSection {
    fn default() -> Self {
        Self { boost: DEFAULT_BOOST, self_top_n: DEFAULT_SELF_TOP_N }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationSection {
    pub steps: usize,
    pub batch_pairs: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub nce_temperature: f64,
    pub pool_temperature: f64,
    pub label_smoothing: f64,
    pub train_backbone: bool,
    /// Fractions of the run where the middle and polish phases start.
    pub phase_boundaries: [f64; 2],
    /// `[context InfoNCE, sense InfoNCE, target LM]` per phase.
    pub phase_weights: [[f64; 3]; 3],
    pub freeze_ctx_in_polish: bool,
}

impl Default for AdaptationSection {
    fn default() -> Self {
        let d = AdaptConfig::default();
        let s = &d.schedule;
        Self {
            steps: 600,
            batch_pairs: d.batch_pairs,
            lr: d.optim.lr,
            warmup_ratio: d.optim.warmup_ratio,
            weight_decay: d.optim.weight_decay,
            nce_temperature: d.nce_temperature,
            pool_temperature: d.pool_temperature,
            label_smoothing: d.label_smoothing,
            train_backbone: d.train_backbone,
            phase_boundaries: [s.boundaries.0, s.boundaries.1],
            phase_weights: s.weights.map(|w| [w.ctx, w.sense, w.lm]),
            freeze_ctx_in_polish: s.freeze_ctx_in_polish,
        }
    }
}

impl AdaptationSection {
    pub fn core(&self) -> AdaptConfig {
        AdaptConfig {
            schedule: AdaptSchedule {
                total_steps: self.steps,
                boundaries: (self.phase_boundaries[0], self.phase_boundaries[1]),
                weights: self.phase_weights.map(|[ctx, sense, lm]| PhaseWeights { ctx, sense, lm }),
                freeze_ctx_in_polish: self.freeze_ctx_in_polish,
            },
            batch_pairs: self.batch_pairs,
            nce_temperature: self.nce_temperature,
            pool_temperature: self.pool_temperature,
            label_smoothing: self.label_smoothing,
            train_backbone: self.train_backbone,
            optim: optim(self.lr, self.warmup_ratio, self.weight_decay),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub out: PathBuf,
    /// Pre-built dataset directory; when unset, `train-base` generates one under `<out>/data`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self { out: PathBuf::from("runs/acros"), data: None }
    }
}

fn qualify(section: &str, e: CoreError) -> CliError {
    match e {
        CoreError::InvalidArgument { field, msg } => CliError::Config(format!("{section}.{field}: {msg}")),
        other => CliError::Config(format!("{section}: {other}")),
    }
}

fn bad(key: &str, msg: &str) -> CliError {
    CliError::Config(format!("{key}: {msg}"))
}

fn finite_positive(key: &str, x: f64) -> Result<(), CliError> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(bad(key, "must be positive and finite"))
    }
}

fn unit_interval(key: &str, x: f64) -> Result<(), CliError> {
    if (0.0..1.0).contains(&x) {
        Ok(())
    } else {
        Err(bad(key, "must lie in [0, 1)"))
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string().trim_end().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Range checks on every field; the error names the first offending key.
    pub fn validate(&self) -> Result<(), CliError> {
        let r = &self.run;
        if r.bootstrap_resamples == 0 {
            return Err(bad("run.bootstrap_resamples", "must be positive"));
        }

        self.data.synth().validate().map_err(|e| qualify("data", e))?;
        if self.data.vocab_max < 4 {
            return Err(bad("data.vocab_max", "must be at least 4"));
        }
        if self.data.n_homographs == 0 {
            return Err(bad("data.n_homographs", "the WSD suite needs at least one homograph"));
        }
        if self.data.cipher_heldout < 2 {
            return Err(bad("data.cipher_heldout", "retrieval needs at least two pairs"));
        }

        let m = &self.model;
        // the vocabulary size is only known after data generation
        m.decoder(self.data.vocab_max).validate().map_err(|e| qualify("model", e))?;
        m.sense().validate().map_err(|e| qualify("model", e))?;

        let b = &self.base;
        b.train().validate().map_err(|e| qualify("base", e))?;
        if b.steps == 0 {
            return Err(bad("base.steps", "must be positive"));
        }
        if !(b.weight_decay >= 0.0 && b.weight_decay.is_finite()) {
            return Err(bad("base.weight_decay", "must be nonnegative"));
        }

        let i = &self.induction;
        i.core().validate().map_err(|e| qualify("induction", e))?;
        if !(i.weight_decay >= 0.0 && i.weight_decay.is_finite()) {
            return Err(bad("induction.weight_decay", "must be nonnegative"));
        }

        let p = &self.backpack;
        if p.variants.is_empty() {
            return Err(bad("backpack.variants", "list at least one of cpt, distill, distill-frozen"));
        }
        for (n, v) in p.variants.iter().enumerate() {
            if Conversion::parse(v).is_err() {
                return Err(bad("backpack.variants", &format!("unknown variant `{v}` (expected cpt, distill, distill-frozen)")));
            }
            if p.variants[..n].contains(v) {
                return Err(bad("backpack.variants", &format!("`{v}` listed twice")));
            }
        }
        p.core(Conversion::Cpt).validate().map_err(|e| match e {
            CoreError::InvalidArgument { field, msg } if field == "backpack_k" => bad("backpack.k", &msg),
            other => qualify("backpack", other),
        })?;
        if !(p.weight_decay >= 0.0 && p.weight_decay.is_finite()) {
            return Err(bad("backpack.weight_decay", "must be nonnegative"));
        }

        let s = &self.svd;
        if s.samples < 2 {
            return Err(bad("svd.samples", "must be at least 2"));
        }
        if s.thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(bad("svd.thresholds", "each threshold must lie in (0, 1]"));
        }
        if s.k_marks.iter().any(|&k| k == 0) {
            return Err(bad("svd.k_marks", "ranks must be positive"));
        }

        if ActivationKind::parse(&self.wsd.activation).is_err() {
            return Err(bad("wsd.activation", "expected attention-mass or contribution-norm"));
        }

        finite_positive("steering.boost", self.steering.boost)?;
        if self.steering.self_top_n == 0 {
            return Err(bad("steering.self_top_n", "must be positive"));
        }

        let a = &self.adaptation;
        a.core().validate().map_err(|e| qualify("adaptation", e))?;
        if a.steps == 0 {
            return Err(bad("adaptation.steps", "must be positive"));
        }
        unit_interval("adaptation.warmup_ratio", a.warmup_ratio)?;
        if !(a.weight_decay >= 0.0 && a.weight_decay.is_finite()) {
            return Err(bad("adaptation.weight_decay", "must be nonnegative"));
        }
        if a.batch_pairs > self.data.cipher_train {
            return Err(bad("adaptation.batch_pairs", "exceeds data.cipher_train"));
        }

        if self.paths.out.as_os_str().is_empty() {
            return Err(bad("paths.out", "must not be empty"));
        }
        Ok(())
    }
}
