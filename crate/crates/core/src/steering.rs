//! Senses as causal handles: analytic single-sense boosts, substitute mass,
//! slot selectors and the norm-matched dense coordinate control.

use std::fmt::Write as _;
use std::path::Path;

use crate::acros::{AcrosModel, AcrosTrace};
use crate::error::{Error, Result};
use crate::numerics::{RngState, Scalar, Tensor};
use crate::tokenizer::{Vocab, BOS, UNK};

pub const DEFAULT_BOOST: f64 = 1.2;
pub const DEFAULT_SELF_TOP_N: usize = 10;

/// One steering record with tokens kept as strings.
#[derive(Clone, Debug, PartialEq)]
pub struct SteerRecord {
    pub id: String,
    pub context: Vec<String>,
    pub target_pos: usize,
    pub answer_pos: usize,
    /// `(substitute, annotator count)`.
    pub substitutes: Vec<(String, u32)>,
}

impl SteerRecord {
    /// `id, context, j, q, substitute, count, substitute, count, …`
    pub fn to_line(&self) -> String {
        let mut s = format!("{}\t{}\t{}\t{}", self.id, self.context.join(" "), self.target_pos, self.answer_pos);
        for (w, c) in &self.substitutes {
            let _ = write!(s, "\t{w}\t{c}");
        }
        s
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() < 6 || f.len() % 2 != 0 {
            return Err(Error::format(format!("steering record needs 4 fields plus substitute/count pairs: {line:?}")));
        }
        let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| Error::format(format!("bad {what} {s:?}")));
        let substitutes = f[4..]
            .chunks(2)
            .map(|c| Ok((c[0].to_string(), c[1].parse::<u32>().map_err(|_| Error::format(format!("bad count {:?}", c[1])))?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            id: f[0].to_string(),
            context: f[1].split_whitespace().map(String::from).collect(),
            target_pos: num(f[2], "j")?,
            answer_pos: num(f[3], "q")?,
            substitutes,
        })
    }
}

pub fn write_cases(path: &Path, records: &[SteerRecord]) -> Result<()> {
    let body: String = records.iter().map(|r| r.to_line() + "\n").collect();
    std::fs::write(path, body)?;
    Ok(())
}

pub fn read_cases(path: &Path) -> Result<Vec<SteerRecord>> {
    std::fs::read_to_string(path)?.lines().filter(|l| !l.trim().is_empty()).map(SteerRecord::from_line).collect()
}

/// Encoded case: BOS-prefixed ids, positions shifted past BOS, and weights
/// normalized to sum 1.
#[derive(Clone, Debug, PartialEq)]
pub struct SteeringCase {
    pub id: String,
    pub context: Vec<usize>,
    pub j: usize,
    pub q: usize,
    pub substitutes: Vec<(usize, f64)>,
}

impl SteeringCase {
    pub fn new(id: impl Into<String>, context: Vec<usize>, j: usize, q: usize, counts: &[(usize, f64)]) -> Result<Self> {
        let id = id.into();
        if counts.is_empty() {
            return Err(Error::invalid("substitutes", format!("{id}: no substitutes")));
        }
        if j > q || q >= context.len() {
            return Err(Error::invalid("answer_pos", format!("{id}: need j <= q < {}, got j={j} q={q}", context.len())));
        }
        if counts.iter().any(|&(_, c)| !(c > 0.0) || !c.is_finite()) {
            return Err(Error::invalid("substitutes", format!("{id}: counts must be positive")));
        }
        let total: f64 = counts.iter().map(|c| c.1).sum();
        let substitutes = counts.iter().map(|&(t, c)| (t, c / total)).collect();
        Ok(Self { id, context, j, q, substitutes })
    }

    pub fn encode(r: &SteerRecord, vocab: &Vocab) -> Result<Self> {
        let mut context = vec![BOS];
        context.extend(vocab.encode(&r.context.join(" ")));
        let counts = r
            .substitutes
            .iter()
            .map(|(w, c)| match vocab.encode(w).as_slice() {
                [t] if *t != UNK => Ok((*t, *c as f64)),
                _ => Err(Error::invalid("substitutes", format!("{}: {w:?} is not a single known token", r.id))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(&r.id, context, r.target_pos + 1, r.answer_pos + 1, &counts)
    }
}

/// `Δh_k = g (b − 1) C_{k,q,j} E_{k,j}` for batch row 0.
pub fn sense_boost_delta<S: Scalar>(trace: &AcrosTrace<S>, j: usize, q: usize, k: usize, b: f64) -> Result<Vec<f64>> {
    if j > q || q >= trace.seq || k >= trace.k {
        return Err(Error::OutOfRange(format!("slot {k}, j={j}, q={q} in a trace with K={} seq={}", trace.k, trace.seq)));
    }
    let s = trace.gate * (b - 1.0) * trace.c_at(0, k, q, j);
    Ok(trace.e_vec(0, k, j).iter().map(|x| s * x.as_f64()).collect())
}

/// `z + Δh Wᵀ` for a head matrix `W [V, d]`.
pub fn intervene_logits<S: Scalar>(z: &[f64], dh: &[f64], w: &Tensor<S>) -> Result<Vec<f64>> {
    if w.rows() != z.len() || w.cols() != dh.len() {
        return Err(Error::shape(format!("head {:?} vs z {} and Δh {}", w.shape(), z.len(), dh.len())));
    }
    Ok(z.iter().enumerate().map(|(v, zv)| zv + w.row(v).iter().zip(dh).map(|(a, b)| a.as_f64() * b).sum::<f64>()).collect())
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `log Σ_y w_y softmax(z)_y`.
pub fn substitute_mass(z: &[f64], subs: &[(usize, f64)]) -> Result<f64> {
    if subs.is_empty() {
        return Err(Error::Empty("substitute set"));
    }
    if let Some(&(t, _)) = subs.iter().find(|s| s.0 >= z.len()) {
        return Err(Error::OutOfRange(format!("substitute {t} with vocab {}", z.len())));
    }
    let lse = log_sum_exp(z);
    let terms: Vec<f64> = subs.iter().map(|&(t, w)| w.ln() + z[t] - lse).collect();
    Ok(log_sum_exp(&terms))
}

/// `KL(softmax(z_p) ‖ softmax(z_q))`, clamped at 0.
pub fn kl_logits(zp: &[f64], zq: &[f64]) -> f64 {
    let (lp, lq) = (log_sum_exp(zp), log_sum_exp(zq));
    let kl: f64 = zp.iter().zip(zq).map(|(a, b)| (a - lp).exp() * ((a - lp) - (b - lq))).sum();
    kl.max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    TargetBest,
    SelfTopK(usize),
    ContributionNorm,
    Random,
    Norm,
}

impl Strategy {
    pub const ALL: [Strategy; 5] =
        [Strategy::TargetBest, Strategy::SelfTopK(DEFAULT_SELF_TOP_N), Strategy::ContributionNorm, Strategy::Random, Strategy::Norm];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "target-best" => Ok(Self::TargetBest),
            "self-top-k" => Ok(Self::SelfTopK(DEFAULT_SELF_TOP_N)),
            "contribution-norm" => Ok(Self::ContributionNorm),
            "random" => Ok(Self::Random),
            "norm" => Ok(Self::Norm),
            other => Err(Error::UnknownStrategy(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::TargetBest => "target-best",
            Self::SelfTopK(_) => "self-top-k",
            Self::ContributionNorm => "contribution-norm",
            Self::Random => "random",
            Self::Norm => "norm",
        }
    }
}

/// Per-case quantities shared by every selector.
#[derive(Clone, Debug)]
pub struct CaseState<S> {
    pub trace: AcrosTrace<S>,
    /// Base (pre-intervention) ACROS logits at `q`.
    pub z: Vec<f64>,
    /// `Δh_k` for every slot.
    pub deltas: Vec<Vec<f64>>,
    /// Intervened logits for every slot.
    pub z_int: Vec<Vec<f64>>,
}

impl<S: Scalar> CaseState<S> {
    pub fn new(model: &AcrosModel<S>, case: &SteeringCase, b: f64) -> Result<Self> {
        let n = case.q + 1;
        let trace = model.forward(&case.context[..n], 1, n)?;
        let z = trace.row(&trace.logits, 0, case.q);
        let deltas = (0..trace.k).map(|k| sense_boost_delta(&trace, case.j, case.q, k, b)).collect::<Result<Vec<_>>>()?;
        let w = model.backbone.wte();
        let z_int = deltas.iter().map(|dh| intervene_logits(&z, dh, w)).collect::<Result<Vec<_>>>()?;
        Ok(Self { trace, z, deltas, z_int })
    }

    /// `m(z_int, Y) − m(z, Y)` for slot `k`.
    pub fn delta(&self, k: usize, subs: &[(usize, f64)]) -> Result<f64> {
        Ok(substitute_mass(&self.z_int[k], subs)? - substitute_mass(&self.z, subs)?)
    }
}

/// Top-`n` next-token predictions at `q` (excluding `exclude`), weighted by
/// renormalized base probabilities.
pub fn self_substitutes(z: &[f64], n: usize, exclude: usize) -> Vec<(usize, f64)> {
    let lse = log_sum_exp(z);
    let mut ids: Vec<usize> = (0..z.len()).filter(|&t| t != exclude).collect();
    ids.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
    ids.truncate(n);
    let p: Vec<f64> = ids.iter().map(|&t| (z[t] - lse).exp()).collect();
    let total: f64 = p.iter().sum();
    ids.into_iter().zip(p).map(|(t, p)| (t, p / total)).collect()
}

fn argmax(xs: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in xs.into_iter().enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

fn l2(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn select_slot<S: Scalar>(state: &CaseState<S>, case: &SteeringCase, strategy: Strategy, rng: &mut RngState) -> Result<usize> {
    let t = &state.trace;
    let (j, q) = (case.j, case.q);
    Ok(match strategy {
        Strategy::TargetBest => argmax((0..t.k).map(|k| state.delta(k, &case.substitutes)).collect::<Result<Vec<_>>>()?),
        Strategy::SelfTopK(n) => {
            let ys = self_substitutes(&state.z, n, case.context[j]);
            argmax((0..t.k).map(|k| state.delta(k, &ys)).collect::<Result<Vec<_>>>()?)
        }
        Strategy::ContributionNorm => argmax((0..t.k).map(|k| t.c_at(0, k, q, j) * l2(t.e_vec(0, k, j).iter().map(|x| x.as_f64())))),
        Strategy::Random => rng.below(t.k),
        Strategy::Norm => argmax((0..t.k).map(|k| l2(t.e_vec(0, k, j).iter().map(|x| x.as_f64())))),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InterventionResult {
    pub delta: f64,
    pub success: bool,
    pub kl: f64,
    pub slot: usize,
    pub boost: f64,
}

impl InterventionResult {
    fn of<S: Scalar>(state: &CaseState<S>, case: &SteeringCase, slot: usize, boost: f64) -> Result<Self> {
        let delta = state.delta(slot, &case.substitutes)?;
        Ok(Self { delta, success: delta > 0.0, kl: kl_logits(&state.z, &state.z_int[slot]), slot, boost })
    }
}

/// Best `±budget·e_i` hidden-coordinate intervention: `(delta, kl)`.
pub fn dense_coordinate_control<S: Scalar>(z: &[f64], w: &Tensor<S>, subs: &[(usize, f64)], budget: f64) -> Result<(f64, f64)> {
    if w.rows() != z.len() {
        return Err(Error::shape("head rows must match the logit width"));
    }
    if budget == 0.0 {
        return Ok((0.0, 0.0));
    }
    let m0 = substitute_mass(z, subs)?;
    let mut best = (f64::NEG_INFINITY, 0.0);
    let mut zi = vec![0.0; z.len()];
    for i in 0..w.cols() {
        for sign in [1.0, -1.0] {
            for (v, out) in zi.iter_mut().enumerate() {
                *out = z[v] + sign * budget * w.row(v)[i].as_f64();
            }
            let delta = substitute_mass(&zi, subs)? - m0;
            if delta > best.0 {
                best = (delta, kl_logits(z, &zi));
            }
        }
    }
    Ok(best)
}

/// Kahan-compensated mean.
fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp, mut n) = (0.0f64, 0.0f64, 0usize);
    for x in xs {
        let y = x - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SteeringEval {
    pub strategy: String,
    pub results: Vec<InterventionResult>,
    pub mean_delta: f64,
    /// Percent of cases with a positive delta.
    pub success_pct: f64,
    pub mean_kl: f64,
}

impl SteeringEval {
    fn from_results(strategy: &str, results: Vec<InterventionResult>) -> Self {
        Self {
            strategy: strategy.to_string(),
            mean_delta: mean(results.iter().map(|r| r.delta)),
            success_pct: 100.0 * mean(results.iter().map(|r| if r.success { 1.0 } else { 0.0 })),
            mean_kl: mean(results.iter().map(|r| r.kl)),
            results,
        }
    }
}

pub fn case_states<S: Scalar>(model: &AcrosModel<S>, cases: &[SteeringCase], b: f64) -> Result<Vec<CaseState<S>>> {
    cases.iter().map(|c| CaseState::new(model, c, b)).collect()
}

/// Every selector over precomputed case states; `seed` drives the random selector.
pub fn evaluate_states<S: Scalar>(
    states: &[CaseState<S>],
    cases: &[SteeringCase],
    strategy: Strategy,
    b: f64,
    seed: u64,
) -> Result<SteeringEval> {
    if cases.is_empty() {
        return Err(Error::Empty("steering cases"));
    }
    let mut rng = RngState::new(seed);
    let results = states
        .iter()
        .zip(cases)
        .map(|(s, c)| InterventionResult::of(s, c, select_slot(s, c, strategy, &mut rng)?, b))
        .collect::<Result<Vec<_>>>()?;
    Ok(SteeringEval::from_results(strategy.name(), results))
}

pub fn evaluate_steering<S: Scalar>(model: &AcrosModel<S>, cases: &[SteeringCase], strategy: Strategy, b: f64, seed: u64) -> Result<SteeringEval> {
    if cases.is_empty() {
        return Err(Error::Empty("steering cases"));
    }
    evaluate_states(&case_states(model, cases, b)?, cases, strategy, b, seed)
}

/// Dense control paired with the oracle sense intervention; the budget of
/// every case is the norm of its target-best `Δh`.
pub fn evaluate_dense_control<S: Scalar>(
    model: &AcrosModel<S>,
    states: &[CaseState<S>],
    cases: &[SteeringCase],
    b: f64,
) -> Result<(SteeringEval, SteeringEval)> {
    let oracle = evaluate_states(states, cases, Strategy::TargetBest, b, 0)?;
    let w = model.backbone.wte();
    let dense = states
        .iter()
        .zip(cases)
        .zip(&oracle.results)
        .map(|((s, c), r)| {
            let budget = l2(s.deltas[r.slot].iter().copied());
            let (delta, kl) = dense_coordinate_control(&s.z, w, &c.substitutes, budget)?;
            Ok(InterventionResult { delta, success: delta > 0.0, kl, slot: r.slot, boost: b })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((oracle, SteeringEval::from_results("dense-coordinate", dense)))
}

/// One row per selector: Delta, Succ. %, KL.
pub fn steering_table(rows: &[SteeringEval]) -> String {
    let mut s = format!("{:<20}{:>12}{:>10}{:>12}\n", "selector", "Delta", "Succ. %", "KL");
    for r in rows {
        let _ = writeln!(s, "{:<20}{:>+12.3e}{:>10.1}{:>12.3e}", r.strategy, r.mean_delta, r.success_pct, r.mean_kl);
    }
    s
}
