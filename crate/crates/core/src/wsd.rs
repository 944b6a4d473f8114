//! Senses as measurements: K-dimensional activation vectors, gloss matching
//! by cosine argmax, and the gloss-likelihood and dense-state controls.

use std::fmt::Write as _;
use std::path::Path;

use crate::acros::AcrosModel;
use crate::base_lm::DecoderModel;
use crate::error::{Error, Result};
use crate::numerics::kernels::{dot, norm};
use crate::numerics::Scalar;
use crate::tokenizer::{Vocab, BOS};

/// One WSD record with tokens kept as strings.
#[derive(Clone, Debug, PartialEq)]
pub struct WsdRecord {
    pub id: String,
    pub context: Vec<String>,
    pub target_pos: usize,
    pub lemma: String,
    pub gold: String,
    /// `(sense_id, gloss)` pairs in tie-break order.
    pub candidates: Vec<(String, String)>,
}

impl WsdRecord {
    pub fn validate(&self) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(Error::invalid("candidates", format!("{}: no candidates", self.id)));
        }
        if self.target_pos >= self.context.len() {
            return Err(Error::invalid("target_pos", format!("{}: {} outside context", self.id, self.target_pos)));
        }
        if !self.candidates.iter().any(|(s, _)| *s == self.gold) {
            return Err(Error::invalid("gold", format!("{}: gold sense is not a candidate", self.id)));
        }
        if self.candidates.iter().any(|(_, g)| g.split_whitespace().next().is_none()) {
            return Err(Error::invalid("gloss", format!("{}: empty gloss", self.id)));
        }
        Ok(())
    }

    /// `id, context, target_pos, lemma, gold, sense, gloss, sense, gloss, …`
    pub fn to_line(&self) -> String {
        let mut s = format!("{}\t{}\t{}\t{}\t{}", self.id, self.context.join(" "), self.target_pos, self.lemma, self.gold);
        for (sid, gloss) in &self.candidates {
            let _ = write!(s, "\t{sid}\t{gloss}");
        }
        s
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() < 7 || (f.len() - 5) % 2 != 0 {
            return Err(Error::format(format!("WSD record needs 5 fields plus sense/gloss pairs: {line:?}")));
        }
        let target_pos = f[2].parse().map_err(|_| Error::format(format!("bad target_pos {:?}", f[2])))?;
        let r = Self {
            id: f[0].to_string(),
            context: f[1].split_whitespace().map(String::from).collect(),
            target_pos,
            lemma: f[3].to_string(),
            gold: f[4].to_string(),
            candidates: f[5..].chunks(2).map(|c| (c[0].to_string(), c[1].to_string())).collect(),
        };
        r.validate()?;
        Ok(r)
    }
}

pub fn write_wsd(path: &Path, records: &[WsdRecord]) -> Result<()> {
    let body: String = records.iter().map(|r| r.to_line() + "\n").collect();
    std::fs::write(path, body)?;
    Ok(())
}

pub fn read_wsd(path: &Path) -> Result<Vec<WsdRecord>> {
    std::fs::read_to_string(path)?.lines().filter(|l| !l.trim().is_empty()).map(WsdRecord::from_line).collect()
}

/// A record encoded against a vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct WsdInstance {
    pub record: WsdRecord,
    /// BOS-prefixed context ids.
    pub context: Vec<usize>,
    /// Index of the target inside `context` (BOS included).
    pub target: usize,
    /// BOS-prefixed `<lemma> : <gloss>` prompts, one per candidate.
    pub probes: Vec<Vec<usize>>,
    /// Index of the first lemma token in every probe.
    pub lemma_pos: usize,
    /// Length of the `BOS <lemma> :` prefix of every probe.
    pub prefix_len: usize,
}

impl WsdInstance {
    pub fn encode(record: &WsdRecord, vocab: &Vocab) -> Result<Self> {
        record.validate()?;
        let mut context = vec![BOS];
        context.extend(vocab.encode(&record.context.join(" ")));
        let lemma = vocab.encode(&record.lemma);
        if lemma.is_empty() {
            return Err(Error::invalid("lemma", format!("{}: lemma has no tokens", record.id)));
        }
        let mut prefix = vec![BOS];
        prefix.extend(&lemma);
        prefix.extend(vocab.encode(":"));
        let probes = record
            .candidates
            .iter()
            .map(|(_, gloss)| {
                let mut p = prefix.clone();
                p.extend(vocab.encode(gloss));
                p
            })
            .collect();
        Ok(Self { record: record.clone(), context, target: record.target_pos + 1, probes, lemma_pos: 1, prefix_len: prefix.len() })
    }
}

/// What the K-vector measures at a position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActivationKind {
    /// `a_k = ‖Σ_j C_{k,q,j} E_{k,j}‖`.
    ContributionNorm,
    /// `a_k = C_{k,q,anchor}`: attention mass placed on the anchor token.
    AttentionMass,
}

impl ActivationKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "contribution-norm" => Ok(Self::ContributionNorm),
            "attention-mass" => Ok(Self::AttentionMass),
            other => Err(Error::invalid("activation", format!("unknown activation {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::ContributionNorm => "contribution-norm",
            Self::AttentionMass => "attention-mass",
        }
    }
}

/// L2-normalized nonnegative K-vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SenseActivation(pub Vec<f64>);

fn log_prob<S: Scalar>(row: &[S], target: usize) -> f64 {
    let m = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x.as_f64() - m).exp()).sum::<f64>().ln();
    row[target].as_f64() - lse
}

fn normalized(v: Vec<f64>, what: &'static str) -> Result<Vec<f64>> {
    let n = norm(&v);
    if !(n > 1e-12) {
        return Err(Error::DegenerateVector(what));
    }
    Ok(v.into_iter().map(|x| x / n).collect())
}

/// Activation at `pos` of `tokens`; `anchor` is the attended position for
/// [`ActivationKind::AttentionMass`] (ignored otherwise).
pub fn sense_activation_at<S: Scalar>(
    model: &AcrosModel<S>,
    tokens: &[usize],
    pos: usize,
    anchor: usize,
    kind: ActivationKind,
) -> Result<SenseActivation> {
    if pos >= tokens.len() || anchor > pos {
        return Err(Error::OutOfRange(format!("position {pos} (anchor {anchor}) in {} tokens", tokens.len())));
    }
    let t = model.forward(&tokens[..=pos], 1, pos + 1)?;
    let a: Vec<f64> = match kind {
        ActivationKind::ContributionNorm => {
            (0..t.k).map(|k| norm(&t.u_vec(0, k, pos).iter().map(|x| x.as_f64()).collect::<Vec<_>>())).collect()
        }
        ActivationKind::AttentionMass => (0..t.k).map(|k| t.c_at(0, k, pos, anchor)).collect(),
    };
    Ok(SenseActivation(normalized(a, "sense activation")?))
}

/// Contribution-norm activation at `pos`.
pub fn sense_activation<S: Scalar>(model: &AcrosModel<S>, tokens: &[usize], pos: usize) -> Result<SenseActivation> {
    sense_activation_at(model, tokens, pos, pos, ActivationKind::ContributionNorm)
}

/// Activation of a `<lemma> : <gloss>` probe, read at the final prompt
/// position (the lemma position cannot see the gloss under causal masking).
/// The attention-mass variant measures the mass placed on the lemma token.
pub fn gloss_activation<S: Scalar>(model: &AcrosModel<S>, probe: &[usize], lemma_pos: usize, kind: ActivationKind) -> Result<SenseActivation> {
    if probe.len() < 2 {
        return Err(Error::Empty("gloss probe"));
    }
    sense_activation_at(model, probe, probe.len() - 1, lemma_pos, kind)
}

/// Index of the candidate whose vector has the largest cosine with `ctx`;
/// the first candidate wins ties.
pub fn match_candidates(ctx: &[f64], cands: &[Vec<f64>]) -> Result<usize> {
    if cands.is_empty() {
        return Err(Error::Empty("candidate list"));
    }
    let nc = norm(ctx);
    if !(nc > 1e-12) {
        return Err(Error::DegenerateVector("context representation"));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, c) in cands.iter().enumerate() {
        let n = norm(c);
        if !(n > 1e-12) {
            return Err(Error::DegenerateVector("candidate representation"));
        }
        let cos = dot(ctx, c) / (nc * n);
        if cos > best.1 {
            best = (i, cos);
        }
    }
    Ok(best.0)
}

/// Shared matching skeleton: `rep(tokens, pos, anchor)` gives the vector for
/// the context (at the target) and for every probe (at its final position).
fn match_with(inst: &WsdInstance, rep: impl Fn(&[usize], usize, usize) -> Result<Vec<f64>>) -> Result<String> {
    if inst.probes.len() == 1 {
        return Ok(inst.record.candidates[0].0.clone());
    }
    let ctx = rep(&inst.context, inst.target, inst.target)?;
    let cands = inst.probes.iter().map(|p| rep(p, p.len() - 1, inst.lemma_pos)).collect::<Result<Vec<_>>>()?;
    Ok(inst.record.candidates[match_candidates(&ctx, &cands)?].0.clone())
}

pub fn disambiguate<S: Scalar>(model: &AcrosModel<S>, inst: &WsdInstance, kind: ActivationKind) -> Result<String> {
    match_with(inst, |toks, pos, anchor| Ok(sense_activation_at(model, toks, pos, anchor, kind)?.0))
}

/// Same protocol with normalized final-layer backbone states.
pub fn dense_gloss_control<S: Scalar>(base: &DecoderModel<S>, inst: &WsdInstance) -> Result<String> {
    match_with(inst, |toks, pos, _| {
        let h = base.forward(&toks[..=pos], 1, pos + 1)?.hidden;
        let d = base.config.d_model;
        normalized(h.data()[pos * d..(pos + 1) * d].iter().map(|x| x.as_f64()).collect(), "hidden state")
    })
}

/// Mean log-probability of each gloss given `BOS <lemma> :`; argmax, first wins.
pub fn gloss_likelihood_control<S: Scalar>(base: &DecoderModel<S>, inst: &WsdInstance) -> Result<String> {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, p) in inst.probes.iter().enumerate() {
        let score = if p.len() > inst.prefix_len {
            let logits = base.forward(p, 1, p.len())?.logits;
            let v = base.config.vocab_size;
            let lp: f64 = (inst.prefix_len..p.len())
                .map(|t| log_prob(&logits.data()[(t - 1) * v..t * v], p[t]))
                .sum();
            lp / (p.len() - inst.prefix_len) as f64
        } else {
            f64::NEG_INFINITY
        };
        if score > best.1 {
            best = (i, score);
        }
    }
    Ok(inst.record.candidates[best.0].0.clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct WsdEval {
    pub predictions: Vec<String>,
    pub correct: Vec<bool>,
    /// Equal to accuracy since every instance is answered.
    pub f1: f64,
    /// Mean of `1/|candidates|`.
    pub chance: f64,
}

pub fn evaluate_wsd(dataset: &[WsdInstance], system: impl Fn(&WsdInstance) -> Result<String>) -> Result<WsdEval> {
    if dataset.is_empty() {
        return Err(Error::Empty("WSD dataset"));
    }
    let predictions = dataset.iter().map(&system).collect::<Result<Vec<_>>>()?;
    let correct: Vec<bool> = predictions.iter().zip(dataset).map(|(p, i)| *p == i.record.gold).collect();
    let n = dataset.len() as f64;
    Ok(WsdEval {
        f1: correct.iter().filter(|&&c| c).count() as f64 / n,
        chance: dataset.iter().map(|i| 1.0 / i.record.candidates.len() as f64).sum::<f64>() / n,
        predictions,
        correct,
    })
}
