//! The nine subcommands. Each reads its declared inputs from the run
//! directory, writes checkpoints and metric tables, and returns an
//! [`Outcome`] that [`crate::execute`] turns into a manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use acros_core::acros::{contribution_ratio, sense_separation, token_sense_vectors, train_induction, AcrosModel};
use acros_core::alignment::{adapt, evaluate_retrieval, extend_model_vocab, make_parallel_corpus, read_pairs, write_pairs, CipherSpec, RetrievalReport};
use acros_core::backpack::BackpackModel;
use acros_core::base_lm::{perplexity, perplexity_with, train_base, DecoderModel};
use acros_core::diagnostics::{accuracy_ci, bottleneck_report, collect_hidden_states, mcnemar_exact, PairedOutcomes};
use acros_core::numerics::{stage_rng, Stage};
use acros_core::steering::{case_states, evaluate_dense_control, evaluate_states, read_cases, steering_table, write_cases, SteeringCase, SteeringEval, Strategy};
use acros_core::synth::{cipher_sentences, steering_cases, wsd_suite, ToyCorpus};
use acros_core::tokenizer::{encode_corpus, Batch, Vocab, SPECIALS};
use acros_core::wsd::{dense_gloss_control, disambiguate, evaluate_wsd, gloss_likelihood_control, read_wsd, write_wsd, ActivationKind, WsdEval, WsdInstance};

use crate::config::ExperimentConfig;
use crate::manifest::ExperimentManifest;
use crate::{write_file, CliError};

/// Data files written by `train-base` (or supplied through `paths.data`).
pub mod files {
    pub const TRAIN: &str = "train.txt";
    pub const HELDOUT: &str = "heldout.txt";
    pub const VOCAB: &str = "vocab.txt";
    pub const WSD: &str = "wsd.tsv";
    pub const WSD_SINGLE: &str = "wsd_single.tsv";
    pub const STEER: &str = "steer.tsv";
    pub const VOCAB_EXT: &str = "vocab_ext.txt";
    pub const PAIRS_TRAIN: &str = "pairs_train.tsv";
    pub const PAIRS_HELDOUT: &str = "pairs_heldout.tsv";
    pub const ALL: [&str; 9] = [TRAIN, HELDOUT, VOCAB, WSD, WSD_SINGLE, STEER, VOCAB_EXT, PAIRS_TRAIN, PAIRS_HELDOUT];
}

pub const BASE_CKPT: &str = "base.ckpt";
pub const ACROS_CKPT: &str = "acros.ckpt";
pub const ADAPTED_CKPT: &str = "adapted.ckpt";

pub fn backpack_ckpt(variant: &str) -> String {
    format!("backpack-{variant}.ckpt")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subcommand {
    TrainBase,
    Induce,
    ConvertBackpack,
    DiagnoseSvd,
    EvalWsd,
    EvalSteer,
    Adapt,
    EvalRetrieval,
    Report,
}

impl Subcommand {
    pub const ALL: [Subcommand; 9] = [
        Subcommand::TrainBase,
        Subcommand::Induce,
        Subcommand::ConvertBackpack,
        Subcommand::DiagnoseSvd,
        Subcommand::EvalWsd,
        Subcommand::EvalSteer,
        Subcommand::Adapt,
        Subcommand::EvalRetrieval,
        Subcommand::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Subcommand::TrainBase => "train-base",
            Subcommand::Induce => "induce",
            Subcommand::ConvertBackpack => "convert-backpack",
            Subcommand::DiagnoseSvd => "diagnose-svd",
            Subcommand::EvalWsd => "eval-wsd",
            Subcommand::EvalSteer => "eval-steer",
            Subcommand::Adapt => "adapt",
            Subcommand::EvalRetrieval => "eval-retrieval",
            Subcommand::Report => "report",
        }
    }
}

/// What a subcommand produced, before hashing.
#[derive(Debug, Default)]
pub struct Outcome {
    pub inputs: Vec<PathBuf>,
    pub artifacts: Vec<PathBuf>,
    pub tables: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, f64>,
}

impl Outcome {
    fn metric(&mut self, key: impl Into<String>, value: f64) {
        self.metrics.insert(key.into(), value);
    }
}

/// Validated configuration plus resolved output locations.
pub struct RunContext {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub quiet: bool,
}

impl RunContext {
    pub fn seed(&self) -> u64 {
        self.cfg.run.seed
    }

    pub fn data_dir(&self) -> PathBuf {
        self.cfg.paths.data.clone().unwrap_or_else(|| self.out.join("data"))
    }

    pub fn data(&self, name: &str) -> PathBuf {
        self.data_dir().join(name)
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.out.join("checkpoints").join(name)
    }

    pub fn table_path(&self, name: &str) -> PathBuf {
        self.out.join("tables").join(format!("{name}.txt"))
    }

    pub fn manifest_path(&self, cmd: Subcommand) -> PathBuf {
        self.out.join("manifest").join(format!("{}.json", cmd.name()))
    }

    pub fn report_path(&self) -> PathBuf {
        self.out.join("report.txt")
    }

    fn log(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("[acros] {}", msg.as_ref());
        }
    }

    /// Errors naming `path` when a declared input is missing.
    fn require(&self, path: &Path, producer: &str) -> Result<PathBuf, CliError> {
        if path.is_file() {
            Ok(path.to_path_buf())
        } else {
            Err(CliError::Runtime(format!("missing input {} (produced by `{producer}`)", path.display())))
        }
    }

    fn require_data(&self, name: &str) -> Result<PathBuf, CliError> {
        self.require(&self.data(name), "train-base")
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>, CliError> {
    Ok(std::fs::read_to_string(path)?.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect())
}

/// Aligned two-column table.
fn kv_table(title: &str, rows: &[(String, String)]) -> String {
    let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0).max(6);
    let mut s = format!("# {title}\n");
    for (k, v) in rows {
        let _ = writeln!(s, "{k:<w$}  {v}");
    }
    s
}

fn row(k: &str, v: impl std::fmt::Display) -> (String, String) {
    (k.to_string(), v.to_string())
}

fn heldout_ids(vocab: &Vocab, docs: &[String]) -> Vec<Vec<usize>> {
    docs.iter().map(|d| vocab.encode_with_bos(d)).collect()
}

fn acros_ppl(m: &AcrosModel<f32>, sents: &[Vec<usize>]) -> Result<f64, CliError> {
    let v = m.backbone.config.vocab_size;
    Ok(perplexity_with(|b| m.forward_batch(b)?.logits.reshape(vec![b.batch * b.seq, v]), sents, 32)?)
}

fn backpack_ppl(m: &BackpackModel<f32>, sents: &[Vec<usize>]) -> Result<f64, CliError> {
    Ok(perplexity_with(|b| Ok(m.forward_batch(b)?.logits), sents, 32)?)
}

/// Ids of every non-special token.
fn content_ids(vocab: &Vocab) -> Vec<usize> {
    (SPECIALS.len()..vocab.len()).collect()
}

fn load_base(ctx: &RunContext, out: &mut Outcome) -> Result<DecoderModel<f32>, CliError> {
    let p = ctx.require(&ctx.checkpoint(BASE_CKPT), "train-base")?;
    out.inputs.push(p.clone());
    Ok(DecoderModel::load(&p)?)
}

fn load_acros(ctx: &RunContext, out: &mut Outcome, name: &str, producer: &str) -> Result<AcrosModel<f32>, CliError> {
    let p = ctx.require(&ctx.checkpoint(name), producer)?;
    out.inputs.push(p.clone());
    Ok(AcrosModel::load(&p)?)
}

fn load_vocab(ctx: &RunContext, out: &mut Outcome, name: &str) -> Result<Vocab, CliError> {
    let p = ctx.require_data(name)?;
    out.inputs.push(p.clone());
    Ok(Vocab::load(&p)?)
}

fn load_docs(ctx: &RunContext, out: &mut Outcome, name: &str) -> Result<Vec<String>, CliError> {
    let p = ctx.require_data(name)?;
    out.inputs.push(p.clone());
    read_lines(&p)
}

/// Synthetic corpus, vocabulary and every evaluation dataset.
fn generate_data(ctx: &RunContext) -> Result<Vec<PathBuf>, CliError> {
    let syn = ctx.cfg.data.synth();
    let seed = ctx.seed();
    let corpus = ToyCorpus::generate(&syn, seed)?;
    let mut vocab = Vocab::build(&corpus.train.join(" "), ctx.cfg.data.vocab_max)?;
    let missing: Vec<String> = corpus.language.words().into_iter().filter(|w| vocab.id(w).is_none()).collect();
    vocab.extend(missing);
    let dir = ctx.data_dir();
    std::fs::create_dir_all(&dir)?;
    let path = |n: &str| dir.join(n);
    write_file(&path(files::TRAIN), &(corpus.train.join("\n") + "\n"))?;
    write_file(&path(files::HELDOUT), &(corpus.heldout.join("\n") + "\n"))?;
    vocab.save(&path(files::VOCAB))?;
    let (multi, single) = wsd_suite(&corpus.language, &syn, seed);
    write_wsd(&path(files::WSD), &multi)?;
    write_wsd(&path(files::WSD_SINGLE), &single)?;
    write_cases(&path(files::STEER), &steering_cases(&corpus, &syn, seed))?;
    let (train_s, held_s) = cipher_sentences(&corpus.language, &syn, seed);
    let cipher = CipherSpec::new(&vocab, seed)?;
    let (ext, train_p) = make_parallel_corpus(&train_s, &cipher, &vocab)?;
    let (_, held_p) = make_parallel_corpus(&held_s, &cipher, &vocab)?;
    ext.save(&path(files::VOCAB_EXT))?;
    write_pairs(&path(files::PAIRS_TRAIN), &ext, &train_p)?;
    write_pairs(&path(files::PAIRS_HELDOUT), &ext, &held_p)?;
    Ok(files::ALL.iter().map(|n| path(n)).collect())
}

pub fn train_base_cmd(ctx: &RunContext) -> Result<Outcome, CliError> {
    let mut out = Outcome::default();
    if ctx.cfg.paths.data.is_none() {
        ctx.log("generating synthetic corpus and datasets");
        out.artifacts.extend(generate_data(ctx)?);
    }
    let vocab = load_vocab(ctx, &mut out, files::VOCAB)?;
    let train = load_docs(ctx, &mut out, files::TRAIN)?;
    let held = load_docs(ctx, &mut out, files::HELDOUT)?;
    if ctx.cfg.paths.data.is_none() {
        // generated files are outputs of this command, not inputs
        out.inputs.clear();
    }
    let stream = encode_corpus(&vocab, &train);
    let hp = ctx.cfg.base.train();
    ctx.log(format!("pretraining base: {} steps over {} tokens", hp.steps, stream.len()));
    let (base, log) = train_base(ctx.cfg.model.decoder(vocab.len()), &stream, &hp, ctx.seed())?;
    let ppl = perplexity(&base, &heldout_ids(&vocab, &held))?;
    let p = ctx.checkpoint(BASE_CKPT);
    base.save(&p)?;
    out.artifacts.push(p);
    let first = log.first_decile_mean().unwrap_or(f64::NAN);
    let last = log.last_decile_mean().unwrap_or(f64::NAN);
    out.metric("base.steps", hp.steps as f64);
    out.metric("base.params", base.num_params() as f64);
    out.metric("base.vocab", vocab.len() as f64);
    out.metric("base.train_tokens", stream.len() as f64);
    out.metric("base.loss_first", first);
    out.metric("base.loss_last", last);
    out.metric("base.ppl", ppl);
    let table = kv_table(
        "base pretraining",
        &[
            row("steps", hp.steps),
            row("params", base.num_params()),
            row("vocab", vocab.len()),
            row("train_tokens", stream.len()),
            row("loss_first_decile", format!("{first:.4}")),
            row("loss_last_decile", format!("{last:.4}")),
            row("heldout_ppl", format!("{ppl:.4}")),
        ],
    );
    out.tables.insert("base".into(), table);
    Ok(out)
}

/// Token-weighted mean contribution ratio over held-out documents.
fn heldout_contribution(m: &AcrosModel<f32>, sents: &[Vec<usize>]) -> Result<f64, CliError> {
    let (mut sum, mut n) = (0.0, 0usize);
    for chunk in sents.chunks(32) {
        let b = Batch::from_sequences(chunk)?;
        let t = m.forward_batch(&b)?;
        let count = b.mask.iter().filter(|&&x| x).count();
        sum += contribution_ratio(&t, &b.mask)? * count as f64;
        n += count;
    }
    Ok(sum / n.max(1) as f64)
}

pub fn induce_cmd(ctx: &RunContext) -> Result<Outcome, CliError> {
    let mut out = Outcome::default();
    let base = load_base(ctx, &mut out)?;
    let vocab = load_vocab(ctx, &mut out, files::VOCAB)?;
    let train = load_docs(ctx, &mut out, files::TRAIN)?;
    let held = heldout_ids(&vocab, &load_docs(ctx, &mut out, files::HELDOUT)?);
    let stream = encode_corpus(&vocab, &train);
    let ic = ctx.cfg.induction.core();
    let mut m = AcrosModel::new(base.clone(), ctx.cfg.model.sense(), &mut stage_rng(ctx.seed(), Stage::SenseInit))?;
    ctx.log(format!("inducing K = {} sense slots: {} steps", m.sense.k, ic.train.steps));
    let log = train_induction(&mut m, &stream, &ic, ctx.seed())?;
    let p = ctx.checkpoint(ACROS_CKPT);
    m.save(&p)?;
    out.artifacts.push(p);
    let ppl_base = perplexity(&base, &held)?;
    let ppl = acros_ppl(&m, &held)?;
    let contrib = heldout_contribution(&m, &held)?;
    let sep = sense_separation(&token_sense_vectors(&m, &content_ids(&vocab))?)?;
    let first = log.first_decile_mean().unwrap_or(f64::NAN);
    let last = log.last_decile_mean().unwrap_or(f64::NAN);
    for (k, v) in [
        ("acros.steps", ic.train.steps as f64),
        ("acros.k", m.sense.k as f64),
        ("acros.ppl_base", ppl_base),
        ("acros.ppl", ppl),
        ("acros.ppl_ratio", ppl / ppl_base),
        ("acros.gate", m.gate()),
        ("acros.contribution_pct", contrib),
        ("acros.separation", sep),
        ("acros.loss_first", first),
        ("acros.loss_last", last),
    ] {
        out.metric(k, v);
    }
    let table = kv_table(
        "sense induction",
        &[
            row("steps", ic.train.steps),
            row("K", m.sense.k),
            row("alpha/tau/lambda_div", format!("{}/{}/{}", ic.alpha, ic.tau, ic.lambda_div)),
            row("loss_first_decile", format!("{first:.4}")),
            row("loss_last_decile", format!("{last:.4}")),
            row("ppl_base", format!("{ppl_base:.4}")),
            row("ppl_acros", format!("{ppl:.4}")),
            row("ppl_ratio", format!("{:.4}", ppl / ppl_base)),
            row("gate", format!("{:+.5}", m.gate())),
            row("contribution_pct", format!("{contrib:.3}")),
            row("sense_separation", format!("{sep:+.4}")),
        ],
    );
    out.tables.insert("induce".into(), table);
    Ok(out)
}

pub fn convert_backpack_cmd(ctx: &RunContext) -> Result<Outcome, CliError> {
    let mut out = Outcome::default();
    let base = load_base(ctx, &mut out)?;
    let vocab = load_vocab(ctx, &mut out, files::VOCAB)?;
    let train = load_docs(ctx, &mut out, files::TRAIN)?;
    let held = heldout_ids(&vocab, &load_docs(ctx, &mut out, files::HELDOUT)?);
    let stream = encode_corpus(&vocab, &train);
    let bp = &ctx.cfg.backpack;
    let mut s = format!("# backpack conversion (K = {}, {} steps)\n", bp.k, bp.steps);
    let _ = writeln!(s, "{:<16}{:>8}{:>12}{:>12}{:>12}{:>10}", "variant", "steps", "PPL", "loss_last", "separation", "params");
    for variant in bp.conversions() {
        let cc = bp.core(variant);
        ctx.log(format!("converting to backpack ({}): {} steps", variant.name(), cc.train.steps));
        let (model, log) = acros_core::backpack::convert(&base, &stream, &cc, ctx.seed())?;
        let p = ctx.checkpoint(&backpack_ckpt(variant.name()));
        model.save(&p)?;
        out.artifacts.push(p);
        let ppl = backpack_ppl(&model, &held)?;
        let sep = sense_separation(&model.token_values(&content_ids(&vocab))?)?;
        let last = log.last_decile_mean().unwrap_or(f64::NAN);
        let key = |m: &str| format!("backpack.{}.{m}", variant.name());
        out.metric(key("steps"), cc.train.steps as f64);
        out.metric(key("ppl"), ppl);
        out.metric(key("separation"), sep);
        out.metric(key("loss_last"), last);
        out.metric(key("params"), model.num_params() as f64);
        let _ = writeln!(s, "{:<16}{:>8}{:>12.4}{:>12.4}{:>+12.4}{:>10}", variant.name(), cc.train.steps, ppl, last, sep, model.num_params());
    }
    out.metric("backpack.k", bp.k as f64);
    out.tables.insert("backpack".into(), s);
    Ok(out)
}

pub fn diagnose_svd_cmd(ctx: &RunContext) -> Result<Outcome, CliError> {
    let mut out = Outcome::default();
    let base = load_base(ctx, &mut out)?;
    let vocab = load_vocab(ctx, &mut out, files::VOCAB)?;
    let held = heldout_ids(&vocab, &load_docs(ctx, &mut out, files::HELDOUT)?);
    let c = &ctx.cfg.svd;
    let h = collect_hidden_states(&base, &held, c.samples, &mut stage_rng(ctx.seed(), Stage::Diagnostics))?;
    let rep = bottleneck_report(&h, &c.thresholds, &c.k_marks)?;
    let d = base.config.d_model;
    let mut s = format!("# hidden-state spectrum of the base model (n = {}, d = {d})\n", c.samples);
    s.push_str(&rep.to_text());
    for (t, r) in &rep.rank_at {
        out.metric(format!("svd.rank_at.{t}"), *r as f64);
    }
    for (k, v) in &rep.marks {
        out.metric(format!("svd.cumvar_at.{k}"), *v);
    }
    out.metric("svd.d", d as f64);
    out.tables.insert("svd".into(), s);
    Ok(out)
}

fn encode_wsd(path: &Path, vocab: &Vocab) -> Result<Vec<WsdInstance>, CliError> {
    read_wsd(path)?.iter().map(|r| WsdInstance::encode(r, vocab).map_err(CliError::from)).collect()
}

pub fn eval_wsd_cmd(ctx: &RunContext) -> Result<Outcome, CliError> {
    let mut out = Outcome::default();
    let m = load_acros(ctx, &mut out, ACROS_CKPT, "induce")?;
    let vocab = load_vocab(ctx, &mut out, files::VOCAB)?;
    let multi_p = ctx.require_data(files::WSD)?;
    let single_p = ctx.require_data(files::WSD_SINGLE)?;
    out.inputs.extend([multi_p.clone(), single_p.clone()]);
    let multi = encode_wsd(&multi_p, &vocab)?;
    let single = encode_wsd(&single_p, &vocab)?;
    let head = ctx.cfg.wsd.kind();
    let other = match head {
        ActivationKind::AttentionMass => ActivationKind::ContributionNorm,
        ActivationKind::ContributionNorm => ActivationKind::AttentionMass,
    };
    ctx.log(format!("WSD on {} instances", multi.len()));
    let systems: Vec<(String, WsdEval)> = vec![
        (format!("acros:{}", head.name()), evaluate_wsd(&multi, |i| disambiguate(&m, i, head))?),
        (format!("acros:{}", other.name()), evaluate_wsd(&multi, |i| disambiguate(&m, i, other))?),
        ("dense-gloss".into(), evaluate_wsd(&multi, |i| dense_gloss_control(&m.backbone, i))?),
        ("gloss-likelihood".into(), evaluate_wsd(&multi, |i| gloss_likelihood_control(&m.backbone, i))?),
    ];
    let single_eval = evaluate_wsd(&single, |i| disambiguate(&m, i, head))?;
    let (resamples, bseed) = (ctx.cfg.run.bootstrap_resamples, ctx.cfg.run.bootstrap_seed);
    let chance = systems[0].1.chance;
    let n = multi.len();
    let mut s = format!("# word sense disambiguation (n = {n}, {resamples} bootstrap resamples)\n");
    let _ = writeln!(s, "{:<28}{:>8}{:>18}{:>14}", "system", "F1", "95% CI", "McNemar p");
    let _ = writeln!(s, "{:<28}{:>8.4}", "chance", chance);
    out.metric("wsd.n", n as f64);
    out.metric("wsd.chance", chance);
    for (idx, (name, ev)) in systems.iter().enumerate() {
        let (acc, (lo, hi)) = accuracy_ci(&ev.correct, resamples, bseed)?;
        let p = if idx == 0 { None } else { Some(mcnemar_exact(&PairedOutcomes::from_vectors(&systems[0].1.correct, &ev.correct)?)?) };
        let key = |m: &str| format!("wsd.{name}.{m}");
        out.metric(key("f1"), acc);
        out.metric(key("ci_low"), lo);
        out.metric(key("ci_high"), hi);
        out.metric(key("answered"), ev.predictions.len() as f64);
        let ptext = match p {
            Some(p) => {
                out.metric(key("mcnemar_p"), p);
                format!("{p:.3e}")
            }
            None => "-".into(),
        };
        let _ = writeln!(s, "{name:<28}{acc:>8.4}{:>18}{ptext:>14}", format!("[{lo:.4}, {hi:.4}]"));
    }
    let single_correct = single_eval.correct.iter().filter(|&&c| c).count();
    let _ = writeln!(s, "single-candidate accuracy   {single_correct}/{} ({:.4})", single.len(), single_eval.f1);
    let answered = systems[0].1.predictions.len();
    let _ = writeln!(s, "answered                    {answered}/{n}");
    let _ = writeln!(s, "McNemar p compares each row with the first acros row");
    out.metric("wsd.headline_gain", systems[0].1.f1 - chance);
    out.metric("wsd.single_acc", single_eval.f1);
    out.metric("wsd.single_n", single.len() as f64);
    out.tables.insert("wsd".into(), s);
    Ok(out)
}

/// Fraction of cases where at least one slot has a positive delta.
pub fn any_positive_fraction<S: acros_core::Scalar>(states: &[acros_core::steering::CaseState<S>], cases: &[SteeringCase]) -> Result<f64, CliError> {
    let mut hits = 0usize;
    for (s, c) in states.iter().zip(cases) {
        let mut any = false;
        for k in 0..s.deltas.len() {
            any |= s.delta(k, &c.substitutes)? > 0.0;
        }
        hits += any as usize;
    }
    Ok(hits as f64 / cases.len().max(1) as f64)
}

pub fn eval_steer_cmd(ctx: &RunContext) -> Result<Outcome, CliError> {
    let mut out = Outcome::default();
    let m = load_acros(ctx, &mut out, ACROS_CKPT, "induce")?;
    let vocab = load_vocab(ctx, &mut out, files::VOCAB)?;
    let p = ctx.require_data(files::STEER)?;
    out.inputs.push(p.clone());
    let cases = read_cases(&p)?.iter().map(|r| SteeringCase::encode(r, &vocab)).collect::<acros_core::Result<Vec<_>>>()?;
    let b = ctx.cfg.steering.boost;
    ctx.log(format!("steering {} cases at boost {b}", cases.len()));
    let states = case_states(&m, &cases, b)?;
    let random_seed = stage_rng(ctx.seed(), Stage::Steering).next_u64();
    let mut rows: Vec<SteeringEval> = Vec::new();
    for s in Strategy::ALL {
        let s = match s {
            Strategy::SelfTopK(_) => Strategy::SelfTopK(ctx.cfg.steering.self_top_n),
            other => other,
        };
        rows.push(evaluate_states(&states, &cases, s, b, random_seed)?);
    }
    let (oracle, dense) = evaluate_dense_control(&m, &states, &cases, b)?;
    let wins = oracle.results.iter().zip(&dense.results).filter(|(o, d)| d.delta >= o.delta).count();
    let any = any_positive_fraction(&states, &cases)?;
    for r in rows.iter().chain([&dense]) {
        let key = |x: &str| format!("steer.{}.{x}", r.strategy);
        out.metric(key("delta"), r.mean_delta);
        out.metric(key("success_pct"), r.success_pct);
        out.metric(key("kl"), r.mean_kl);
    }
    out.metric("steer.n", cases.len() as f64);
    out.metric("steer.boost", b);
    out.metric("steer.dense_ge_oracle", wins as f64);
    out.metric("steer.any_positive_pct", 100.0 * any);
    rows.push(dense);
    let mut s = format!("# lexical steering (n = {}, boost = {b})\n", cases.len());
    s.push_str(&steering_table(&rows));
    let _ = writeln!(s, "cases with a positive slot: {:.1}%", 100.0 * any);
    let _ = writeln!(s, "dense delta >= oracle delta: {wins}/{}", cases.len());
    out.tables.insert("steer".into(), s);
    Ok(out)
}

fn load_pairs(ctx: &RunContext, out: &mut Outcome, name: &str, ext: &Vocab) -> Result<Vec<acros_core::alignment::ParallelPair>, CliError> {
    let p = ctx.require_data(name)?;
    out.inputs.push(p.clone());
    Ok(read_pairs(&p, ext)?)
}

/// The induced model with its embedding table grown to the cipher vocabulary.
fn extended(ctx: &RunContext, mut m: AcrosModel<f32>, vocab: &Vocab, ext: &Vocab) -> Result<AcrosModel<f32>, CliError> {
    extend_model_vocab(&mut m, ext.len() - vocab.len(), ctx.seed())?;
    Ok(m)
}

pub fn adapt_cmd(ctx: &RunContext) -> Result<Outcome, CliError> {
    let mut out = Outcome::default();
    let m = load_acros(ctx, &mut out, ACROS_CKPT, "induce")?;
    let vocab = load_vocab(ctx, &mut out, files::VOCAB)?;
    let ext = load_vocab(ctx, &mut out, files::VOCAB_EXT)?;
    let pairs = load_pairs(ctx, &mut out, files::PAIRS_TRAIN, &ext)?;
    let mut m = extended(ctx, m, &vocab, &ext)?;
    let ac = ctx.cfg.adaptation.core();
    ctx.log(format!("adapting on {} cipher pairs: {} steps", pairs.len(), ac.schedule.total_steps));
    let log = adapt(&mut m, &pairs, &ac, ctx.seed())?;
    let p = ctx.checkpoint(ADAPTED_CKPT);
    m.save(&p)?;
    out.artifacts.push(p);
    let first = log.first_decile_mean().unwrap_or(f64::NAN);
    let last = log.last_decile_mean().unwrap_or(f64::NAN);
    out.metric("adapt.steps", ac.schedule.total_steps as f64);
    out.metric("adapt.loss_first", first);
    out.metric("adapt.loss_last", last);
    out.metric("adapt.gate", m.gate());
    let (a, b) = ac.schedule.boundaries;
    let table = kv_table(
        "cipher adaptation",
        &[
            row("pairs", pairs.len()),
            row("steps", ac.schedule.total_steps),
            row("phase_starts", format!("{a}/{b}")),
            row("train_backbone", ac.train_backbone),
            row("loss_first_decile", format!("{first:.4}")),
            row("loss_last_decile", format!("{last:.4}")),
            row("gate", format!("{:+.5}", m.gate())),
        ],
    );
    out.tables.insert("adapt".into(), table);
    Ok(out)
}

pub fn eval_retrieval_cmd(ctx: &RunContext) -> Result<Outcome, CliError> {
    let mut out = Outcome::default();
    let m = load_acros(ctx, &mut out, ACROS_CKPT, "induce")?;
    let adapted = load_acros(ctx, &mut out, ADAPTED_CKPT, "adapt")?;
    let vocab = load_vocab(ctx, &mut out, files::VOCAB)?;
    let ext = load_vocab(ctx, &mut out, files::VOCAB_EXT)?;
    let pairs = load_pairs(ctx, &mut out, files::PAIRS_HELDOUT, &ext)?;
    let unadapted = extended(ctx, m, &vocab, &ext)?;
    let temp = ctx.cfg.adaptation.pool_temperature;
    ctx.log(format!("retrieval over {} held-out pairs", pairs.len()));
    let before = evaluate_retrieval(&unadapted, &pairs, temp)?;
    let after = evaluate_retrieval(&adapted, &pairs, temp)?;
    let (resamples, bseed) = (ctx.cfg.run.bootstrap_resamples, ctx.cfg.run.bootstrap_seed);
    let mut s = format!("# bidirectional retrieval on the cipher language (n = {})\n", pairs.len());
    let _ = writeln!(s, "{:<12}{:>10}{:>18}{:>10}{:>14}", "model", "ctx R@1", "95% CI", "sns R@1", "target PPL");
    for (name, r) in [("unadapted", &before), ("adapted", &after)] {
        let (_, (lo, hi)) = accuracy_ci(&r.ctx_hits, resamples, bseed)?;
        let _ = writeln!(s, "{name:<12}{:>10.4}{:>18}{:>10.4}{:>14.4}", r.ctx_r1, format!("[{lo:.4}, {hi:.4}]"), r.sns_r1, r.target_ppl);
        record_retrieval(&mut out, name, r, lo, hi);
    }
    let ratio = after.target_ppl / before.target_ppl;
    let _ = writeln!(s, "chance R@1   {:.4}", before.chance());
    let _ = writeln!(s, "PPL ratio    {ratio:.5}");
    out.metric("retrieval.n", pairs.len() as f64);
    out.metric("retrieval.chance", before.chance());
    out.metric("retrieval.ppl_ratio", ratio);
    out.tables.insert("retrieval".into(), s);
    Ok(out)
}

fn record_retrieval(out: &mut Outcome, name: &str, r: &RetrievalReport, lo: f64, hi: f64) {
    out.metric(format!("retrieval.{name}.ctx_r1"), r.ctx_r1);
    out.metric(format!("retrieval.{name}.ctx_ci_low"), lo);
    out.metric(format!("retrieval.{name}.ctx_ci_high"), hi);
    out.metric(format!("retrieval.{name}.sns_r1"), r.sns_r1);
    out.metric(format!("retrieval.{name}.target_ppl"), r.target_ppl);
}

pub fn report_cmd(ctx: &RunContext) -> Result<Outcome, CliError> {
    let mut out = Outcome::default();
    let mut manifests = BTreeMap::new();
    for cmd in Subcommand::ALL {
        let p = ctx.manifest_path(cmd);
        if cmd != Subcommand::Report && p.is_file() {
            manifests.insert(cmd.name(), ExperimentManifest::load(&p)?);
            out.inputs.push(p);
        }
    }
    if manifests.is_empty() {
        return Err(CliError::Runtime(format!("no manifests under {}; run the pipeline first", ctx.out.join("manifest").display())));
    }
    let text = crate::report::compose(&manifests);
    let p = ctx.report_path();
    write_file(&p, &text)?;
    out.artifacts.push(p);
    out.tables.insert("report".into(), text);
    Ok(out)
}
