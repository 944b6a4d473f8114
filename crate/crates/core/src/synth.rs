//! Synthetic desk-scale data: a topic-structured toy language with
//! homographs, and the WSD, steering and parallel-sentence sets built on it.

use std::collections::{BTreeMap, BTreeSet};

pub use crate::steering::SteerRecord;
pub use crate::wsd::WsdRecord;
use crate::error::{Error, Result};
use crate::numerics::kernels::{dot, norm};
use crate::numerics::{stage_rng, RngState, Stage};

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const NUCLEI: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Function words shared by every topic.
pub const FUNCTION_WORDS: [&str; 9] = ["the", "a", "of", "in", "is", "like", "and", ".", ":"];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_topics: usize,
    pub nouns: usize,
    pub verbs: usize,
    pub adjectives: usize,
    pub n_homographs: usize,
    /// Chance that a noun slot is filled by one of the topic's homographs.
    pub homograph_rate: f64,
    /// Nouns drawn once per document and reused across its sentences.
    pub cast_size: usize,
    /// Chance that a noun slot reuses a cast noun.
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
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_topics: 16,
            nouns: 6,
            verbs: 3,
            adjectives: 3,
            n_homographs: 24,
            homograph_rate: 0.25,
            cast_size: 2,
            cast_rate: 0.5,
            train_docs: 3000,
            heldout_docs: 200,
            min_sentences: 3,
            max_sentences: 4,
            wsd_per_sense: 6,
            wsd_single: 48,
            steer_contexts: 3,
            cipher_train: 2000,
            cipher_heldout: 200,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_topics", self.n_topics),
            ("nouns", self.nouns),
            ("verbs", self.verbs),
            ("adjectives", self.adjectives),
            ("train_docs", self.train_docs),
            ("heldout_docs", self.heldout_docs),
            ("min_sentences", self.min_sentences),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::invalid(field, "must be positive"));
            }
        }
        if self.n_topics < 4 && self.n_homographs > 0 {
            return Err(Error::invalid("n_topics", "homographs need at least 4 topics"));
        }
        if self.nouns < 5 {
            return Err(Error::invalid("nouns", "must be at least 5 (steering uses four substitutes)"));
        }
        if self.max_sentences < self.min_sentences {
            return Err(Error::invalid("max_sentences", "must be at least min_sentences"));
        }
        if !(0.0..1.0).contains(&self.cast_rate) {
            return Err(Error::invalid("cast_rate", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.homograph_rate) {
            return Err(Error::invalid("homograph_rate", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Topic {
    pub nouns: Vec<String>,
    pub verbs: Vec<String>,
    pub adjectives: Vec<String>,
    /// Indices into [`ToyLanguage::homographs`].
    pub homographs: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Homograph {
    pub lemma: String,
    pub topics: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyLanguage {
    pub topics: Vec<Topic>,
    pub homographs: Vec<Homograph>,
    homograph_rate: f64,
    cast_size: usize,
    cast_rate: f64,
}

fn pseudo_words(n: usize, rng: &mut RngState) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syll = 2 + rng.below(2);
        let w: String = (0..syll).map(|_| format!("{}{}", ONSETS[rng.below(ONSETS.len())], NUCLEI[rng.below(NUCLEI.len())])).collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

impl ToyLanguage {
    pub fn generate(cfg: &SynthConfig, rng: &mut RngState) -> Result<Self> {
        cfg.validate()?;
        let per_topic = cfg.nouns + cfg.verbs + cfg.adjectives;
        let mut words = pseudo_words(cfg.n_topics * per_topic + cfg.n_homographs, rng).into_iter();
        let mut topics: Vec<Topic> = (0..cfg.n_topics)
            .map(|_| {
                let mut take = |n: usize| (0..n).map(|_| words.next().expect("enough words")).collect::<Vec<_>>();
                let nouns = take(cfg.nouns);
                let verbs = take(cfg.verbs);
                let adjectives = take(cfg.adjectives);
                Topic { nouns, verbs, adjectives, homographs: Vec::new() }
            })
            .collect();
        let mut homographs = Vec::with_capacity(cfg.n_homographs);
        for h in 0..cfg.n_homographs {
            let count = 2 + h % 3;
            let mut ts = rng.sample_indices(cfg.n_topics, count);
            ts.sort_unstable();
            for &t in &ts {
                topics[t].homographs.push(h);
            }
            homographs.push(Homograph { lemma: words.next().expect("enough words"), topics: ts });
        }
        Ok(Self { topics, homographs, homograph_rate: cfg.homograph_rate, cast_size: cfg.cast_size, cast_rate: cfg.cast_rate })
    }

    /// Every surface form, function words first.
    pub fn words(&self) -> Vec<String> {
        let mut w: Vec<String> = FUNCTION_WORDS.iter().map(|s| s.to_string()).collect();
        for t in &self.topics {
            w.extend(t.nouns.iter().chain(&t.verbs).chain(&t.adjectives).cloned());
        }
        w.extend(self.homographs.iter().map(|h| h.lemma.clone()));
        w
    }

    fn pick<'a>(xs: &'a [String], rng: &mut RngState) -> &'a str {
        &xs[rng.below(xs.len())]
    }

    fn noun(&self, t: usize, rng: &mut RngState) -> String {
        let topic = &self.topics[t];
        if !topic.homographs.is_empty() && rng.uniform() < self.homograph_rate {
            self.homographs[topic.homographs[rng.below(topic.homographs.len())]].lemma.clone()
        } else {
            Self::pick(&topic.nouns, rng).to_string()
        }
    }

    fn cast_noun(&self, t: usize, cast: &[String], rng: &mut RngState) -> String {
        if !cast.is_empty() && rng.uniform() < self.cast_rate {
            cast[rng.below(cast.len())].clone()
        } else {
            self.noun(t, rng)
        }
    }

    /// One sentence of topic `t`, as tokens.
    pub fn sentence(&self, t: usize, rng: &mut RngState) -> Vec<String> {
        self.sentence_with(t, &[], rng)
    }

    /// One sentence of topic `t` whose noun slots may reuse `cast`.
    pub fn sentence_with(&self, t: usize, cast: &[String], rng: &mut RngState) -> Vec<String> {
        let topic = &self.topics[t];
        let r = rng.uniform();
        let s = |x: &str| x.to_string();
        let n = |rng: &mut RngState| self.cast_noun(t, cast, rng);
        if r < 0.3 {
            let adj = s(Self::pick(&topic.adjectives, rng));
            let a = n(rng);
            let verb = s(Self::pick(&topic.verbs, rng));
            vec![s("the"), adj, a, verb, s("the"), n(rng), s(".")]
        } else if r < 0.6 {
            let a = n(rng);
            let verb = s(Self::pick(&topic.verbs, rng));
            let adj = s(Self::pick(&topic.adjectives, rng));
            vec![s("a"), a, verb, s("in"), s("the"), adj, n(rng), s(".")]
        } else if r < 0.85 {
            let a = n(rng);
            let b = n(rng);
            vec![s("the"), a, s("of"), s("the"), b, s("is"), s(Self::pick(&topic.adjectives, rng)), s(".")]
        } else {
            let a = n(rng);
            let mut b = n(rng);
            while b == a {
                b = self.noun(t, rng);
            }
            vec![s("the"), a, s("is"), s("like"), s("the"), b, s(".")]
        }
    }

    /// A document of `n` sentences from one topic sharing one noun cast.
    pub fn document(&self, t: usize, n: usize, rng: &mut RngState) -> String {
        let cast: Vec<String> = (0..self.cast_size).map(|_| self.noun(t, rng)).collect();
        (0..n).map(|_| self.sentence_with(t, &cast, rng).join(" ")).collect::<Vec<_>>().join(" ")
    }

    /// Short characteristic description of topic `t`.
    pub fn gloss(&self, t: usize) -> String {
        let tp = &self.topics[t];
        format!("{} {} {} {}", tp.adjectives[0], tp.nouns[0], tp.verbs[0], tp.nouns[1])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyCorpus {
    pub language: ToyLanguage,
    pub train: Vec<String>,
    pub heldout: Vec<String>,
    /// Topic of each training document.
    pub train_topics: Vec<usize>,
}

impl ToyCorpus {
    pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<Self> {
        let mut rng = stage_rng(seed, Stage::Data);
        let language = ToyLanguage::generate(cfg, &mut rng)?;
        let docs = |n: usize, rng: &mut RngState| {
            (0..n)
                .map(|_| {
                    let t = rng.below(cfg.n_topics);
                    let len = cfg.min_sentences + rng.below(cfg.max_sentences - cfg.min_sentences + 1);
                    (t, language.document(t, len, rng))
                })
                .collect::<Vec<_>>()
        };
        let train = docs(cfg.train_docs, &mut rng);
        let heldout = docs(cfg.heldout_docs, &mut rng.fork(1));
        Ok(Self {
            train_topics: train.iter().map(|d| d.0).collect(),
            train: train.into_iter().map(|d| d.1).collect(),
            heldout: heldout.into_iter().map(|d| d.1).collect(),
            language,
        })
    }
}

fn sense_id(lemma: &str, topic: usize) -> String {
    format!("{lemma}%{topic}")
}

/// Homograph suite (2–4 candidates) and single-candidate instances.
pub fn wsd_suite(lang: &ToyLanguage, cfg: &SynthConfig, seed: u64) -> (Vec<WsdRecord>, Vec<WsdRecord>) {
    let mut rng = stage_rng(seed, Stage::Data).fork(2);
    let mut multi = Vec::new();
    for h in &lang.homographs {
        let candidates: Vec<(String, String)> = h.topics.iter().map(|&t| (sense_id(&h.lemma, t), lang.gloss(t))).collect();
        for &t in &h.topics {
            for _ in 0..cfg.wsd_per_sense {
                let (context, target_pos) = context_with(lang, t, &h.lemma, &mut rng);
                multi.push(WsdRecord {
                    id: format!("wsd.{}", multi.len()),
                    context,
                    target_pos,
                    lemma: h.lemma.clone(),
                    gold: sense_id(&h.lemma, t),
                    candidates: candidates.clone(),
                });
            }
        }
    }
    let mut single = Vec::new();
    for i in 0..cfg.wsd_single {
        let t = i % lang.topics.len();
        let noun = lang.topics[t].nouns[rng.below(lang.topics[t].nouns.len())].clone();
        let (context, target_pos) = context_with(lang, t, &noun, &mut rng);
        single.push(WsdRecord {
            id: format!("wsd1.{i}"),
            context,
            target_pos,
            lemma: noun.clone(),
            gold: sense_id(&noun, t),
            candidates: vec![(sense_id(&noun, t), lang.gloss(t))],
        });
    }
    (multi, single)
}

/// One topic sentence followed by a sentence whose first noun slot is `word`.
fn context_with(lang: &ToyLanguage, t: usize, word: &str, rng: &mut RngState) -> (Vec<String>, usize) {
    let mut ctx = lang.sentence(t, rng);
    let tp = &lang.topics[t];
    let pos = ctx.len() + 2;
    ctx.extend(["the".to_string(), ToyLanguage::pick(&tp.adjectives, rng).to_string(), word.to_string()]);
    ctx.extend([ToyLanguage::pick(&tp.verbs, rng).to_string(), "the".to_string(), lang.noun(t, rng), ".".to_string()]);
    (ctx, pos)
}

/// Sentence-level co-occurrence vectors over `docs`.
pub fn cooccurrence(docs: &[String]) -> BTreeMap<String, BTreeMap<String, f64>> {
    let mut m: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for doc in docs {
        for sent in doc.split(" . ") {
            let toks: Vec<&str> = sent.split_whitespace().filter(|w| !FUNCTION_WORDS.contains(w)).collect();
            for (i, a) in toks.iter().enumerate() {
                for (j, b) in toks.iter().enumerate() {
                    if i != j {
                        *m.entry(a.to_string()).or_default().entry(b.to_string()).or_default() += 1.0;
                    }
                }
            }
        }
    }
    m
}

fn cooc_cosine(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> f64 {
    let keys: BTreeSet<&String> = a.keys().chain(b.keys()).collect();
    let va: Vec<f64> = keys.iter().map(|k| a.get(*k).copied().unwrap_or(0.0)).collect();
    let vb: Vec<f64> = keys.iter().map(|k| b.get(*k).copied().unwrap_or(0.0)).collect();
    let (na, nb) = (norm(&va), norm(&vb));
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(&va, &vb) / (na * nb)
    }
}

/// Steering cases: "<topic sentence> the X is like the" with X at `j` and
/// the next token scored at the final position. Substitutes are the four
/// nouns most similar to X by co-occurrence cosine, with counts 4, 3, 2, 1.
pub fn steering_cases(corpus: &ToyCorpus, cfg: &SynthConfig, seed: u64) -> Vec<SteerRecord> {
    let lang = &corpus.language;
    let cooc = cooccurrence(&corpus.train);
    let nouns: Vec<&String> = lang.topics.iter().flat_map(|t| t.nouns.iter()).collect();
    let empty = BTreeMap::new();
    let mut rng = stage_rng(seed, Stage::Data).fork(3);
    let mut out = Vec::new();
    for (t, topic) in lang.topics.iter().enumerate() {
        for x in &topic.nouns {
            let vx = cooc.get(x).unwrap_or(&empty);
            let mut sims: Vec<(f64, &String)> =
                nouns.iter().filter(|n| **n != x).map(|n| (cooc_cosine(vx, cooc.get(*n).unwrap_or(&empty)), *n)).collect();
            sims.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
            let substitutes: Vec<(String, u32)> = sims.iter().take(4).zip([4, 3, 2, 1]).map(|((_, n), c)| ((*n).clone(), c)).collect();
            for _ in 0..cfg.steer_contexts {
                let mut context = lang.sentence(t, &mut rng);
                let j = context.len() + 1;
                context.extend(["the", x.as_str(), "is", "like", "the"].map(String::from));
                out.push(SteerRecord {
                    id: format!("steer.{}", out.len()),
                    target_pos: j,
                    answer_pos: context.len() - 1,
                    context,
                    substitutes: substitutes.clone(),
                });
            }
        }
    }
    out
}

/// Distinct single sentences for the parallel corpus: (train, held-out),
/// disjoint from each other.
pub fn cipher_sentences(lang: &ToyLanguage, cfg: &SynthConfig, seed: u64) -> (Vec<String>, Vec<String>) {
    let mut rng = stage_rng(seed, Stage::Data).fork(4);
    let mut seen = BTreeSet::new();
    let mut draw = |n: usize, rng: &mut RngState| {
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0;
        while out.len() < n && attempts < n * 1000 {
            attempts += 1;
            let t = rng.below(lang.topics.len());
            let s = lang.sentence(t, rng).join(" ");
            if seen.insert(s.clone()) {
                out.push(s);
            }
        }
        out
    };
    let heldout = draw(cfg.cipher_heldout, &mut rng);
    let train = draw(cfg.cipher_train, &mut rng);
    (train, heldout)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig { train_docs: 200, heldout_docs: 20, cipher_train: 50, cipher_heldout: 20, ..Default::default() }
    }

    #[test]
    fn generation_is_deterministic_and_well_formed() {
        let a = ToyCorpus::generate(&small(), 5).unwrap();
        let b = ToyCorpus::generate(&small(), 5).unwrap();
        assert_eq!(a, b);
        let words: BTreeSet<String> = a.language.words().into_iter().collect();
        assert_eq!(words.len(), a.language.words().len(), "surface forms are unique");
        for d in &a.train {
            assert!(d.split_whitespace().all(|w| words.contains(w)));
        }
        for h in &a.language.homographs {
            assert!((2..=4).contains(&h.topics.len()));
        }
    }

    #[test]
    fn wsd_records_are_valid() {
        let c = ToyCorpus::generate(&small(), 5).unwrap();
        let (multi, single) = wsd_suite(&c.language, &small(), 5);
        assert!(multi.len() >= 400);
        for r in multi.iter().chain(&single) {
            assert_eq!(r.context[r.target_pos], r.lemma);
            assert!(r.candidates.iter().any(|(s, _)| *s == r.gold));
        }
        assert!(single.iter().all(|r| r.candidates.len() == 1));
    }

    #[test]
    fn steering_records_are_valid() {
        let cfg = small();
        let c = ToyCorpus::generate(&cfg, 5).unwrap();
        let cases = steering_cases(&c, &cfg, 5);
        assert!(cases.len() >= 200);
        for r in &cases {
            assert!(r.target_pos <= r.answer_pos && r.answer_pos < r.context.len());
            assert_eq!(r.context[r.answer_pos], "the");
            assert_eq!(r.substitutes.len(), 4);
            assert!(r.substitutes.iter().all(|(s, _)| *s != r.context[r.target_pos]));
        }
    }

    #[test]
    fn cipher_sentences_are_distinct() {
        let c = ToyCorpus::generate(&small(), 5).unwrap();
        let (tr, ho) = cipher_sentences(&c.language, &small(), 5);
        assert_eq!(ho.len(), 20);
        let set: BTreeSet<&String> = tr.iter().chain(&ho).collect();
        assert_eq!(set.len(), tr.len() + ho.len());
    }
}
