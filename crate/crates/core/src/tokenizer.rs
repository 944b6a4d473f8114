//! Closed word-level vocabulary and fixed-length training batches.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::RngState;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const SPECIALS: [&str; 3] = ["<pad>", "<unk>", "<bos>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

impl Vocab {
    /// Whitespace tokens ranked by frequency, ties broken lexicographically,
    /// truncated to `max_size` entries including the three specials.
    pub fn build(corpus: &str, max_size: usize) -> Result<Self> {
        if max_size < 4 {
            return Err(Error::invalid("max_size", "must be at least 4"));
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for w in corpus.split_whitespace() {
            *counts.entry(w).or_default() += 1;
        }
        if counts.is_empty() {
            return Err(Error::Empty("corpus"));
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().filter(|(w, _)| !SPECIALS.contains(w)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let words = ranked.into_iter().take(max_size - SPECIALS.len()).map(|(w, _)| w.to_string());
        Self::from_tokens(SPECIALS.iter().map(|s| s.to_string()).chain(words).collect())
    }

    /// Vocabulary with the given id order; the first three entries must be
    /// the specials.
    pub fn from_tokens(id_to_token: Vec<String>) -> Result<Self> {
        if id_to_token.len() < SPECIALS.len() || id_to_token[..3] != SPECIALS {
            return Err(Error::format("vocabulary must start with <pad>, <unk>, <bos>"));
        }
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (i, t) in id_to_token.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::format(format!("invalid token {t:?} at id {i}")));
            }
            if token_to_id.insert(t.clone(), i).is_some() {
                return Err(Error::format(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { id_to_token, token_to_id })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Appends tokens not already present; returns the new ids in order.
    pub fn extend<I: IntoIterator<Item = String>>(&mut self, tokens: I) -> Vec<usize> {
        let mut ids = Vec::new();
        for t in tokens {
            let id = match self.token_to_id.get(&t) {
                Some(&id) => id,
                None => {
                    self.id_to_token.push(t.clone());
                    self.token_to_id.insert(t, self.id_to_token.len() - 1);
                    self.id_to_token.len() - 1
                }
            };
            ids.push(id);
        }
        ids
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w).unwrap_or(UNK)).collect()
    }

    pub fn encode_with_bos(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(self.encode(text));
        ids
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let words: Result<Vec<&str>> = ids
            .iter()
            .map(|&i| self.token(i).ok_or_else(|| Error::OutOfRange(format!("token id {i} with vocab {}", self.len()))))
            .collect();
        Ok(words?.join(" "))
    }

    pub fn to_text(&self) -> String {
        self.id_to_token.iter().enumerate().map(|(i, t)| format!("{i}\t{t}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (id, tok) = line.split_once('\t').ok_or_else(|| Error::format(format!("vocab line {}: missing tab", n + 1)))?;
            let id: usize = id.parse().map_err(|_| Error::format(format!("vocab line {}: bad id", n + 1)))?;
            if id != tokens.len() {
                return Err(Error::format(format!("vocab line {}: expected id {}, found {id}", n + 1, tokens.len())));
            }
            tokens.push(tok.to_string());
        }
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// One batch of `batch` rows of length `seq`, stored row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    /// Number of scored positions.
    pub fn m(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    /// One row per sequence, right-padded with PAD to the longest; each row
    /// predicts its own next token and the last real position is unscored.
    pub fn from_sequences(seqs: &[Vec<usize>]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Empty("sequence list"));
        }
        let seq = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if seq == 0 {
            return Err(Error::Empty("sequences"));
        }
        let mut tokens = Vec::with_capacity(seqs.len() * seq);
        let mut labels = Vec::with_capacity(seqs.len() * seq);
        let mut mask = Vec::with_capacity(seqs.len() * seq);
        for s in seqs {
            for t in 0..seq {
                let tok = s.get(t).copied().unwrap_or(PAD);
                let lab = s.get(t + 1).copied().unwrap_or(PAD);
                tokens.push(tok);
                labels.push(lab);
                mask.push(tok != PAD && lab != PAD);
            }
        }
        Ok(Self { tokens, labels, mask, batch: seqs.len(), seq })
    }
}

/// Concatenates documents into one stream, each prefixed with BOS.
pub fn encode_corpus(vocab: &Vocab, docs: &[String]) -> Vec<usize> {
    docs.iter().flat_map(|d| vocab.encode_with_bos(d)).collect()
}

/// Packs the stream into non-overlapping windows of length `seq` (remainder
/// dropped), shuffles window order and groups `batch` windows per batch; the
/// final batch may be smaller.
pub fn make_batches(ids: &[usize], seq: usize, batch: usize, rng: &mut RngState) -> Result<Vec<Batch>> {
    if seq == 0 || batch == 0 {
        return Err(Error::invalid("seq/batch", "must be positive"));
    }
    if ids.len() < seq + 1 {
        return Err(Error::invalid("stream", format!("needs at least {} ids, got {}", seq + 1, ids.len())));
    }
    let mut windows: Vec<usize> = (0..ids.len() / seq).collect();
    rng.shuffle(&mut windows);
    let mut out = Vec::new();
    for chunk in windows.chunks(batch) {
        let seqs: Vec<Vec<usize>> = chunk.iter().map(|&w| ids[w * seq..(w + 1) * seq].to_vec()).collect();
        let b = Batch::from_sequences(&seqs)?;
        if b.m() > 0 {
            out.push(b);
        }
    }
    if out.is_empty() {
        return Err(Error::Empty("batches with scored positions"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_then_lexicographic() {
        let v = Vocab::build("a b a", 5).unwrap();
        assert_eq!(&v.tokens()[3..], ["a", "b"]);
        let v = Vocab::build("y x", 10).unwrap();
        assert_eq!(&v.tokens()[3..], ["x", "y"]);
    }

    #[test]
    fn truncation_maps_rare_to_unk() {
        let v = Vocab::build("a a b c", 4).unwrap();
        assert_eq!(v.encode("a b c"), vec![3, UNK, UNK]);
    }

    #[test]
    fn encode_decode() {
        let v = Vocab::build("a b", 8).unwrap();
        let ids = v.encode("a b");
        assert_eq!(v.decode(&ids).unwrap(), "a b");
        assert_eq!(v.encode("zzz"), vec![UNK]);
        assert!(v.encode("").is_empty());
        assert!(v.decode(&[99]).is_err());
        assert!(Vocab::build("  ", 8).is_err());
    }

    #[test]
    fn vocab_text_round_trip() {
        let v = Vocab::build("the cat sat on the mat", 16).unwrap();
        assert_eq!(Vocab::from_text(&v.to_text()).unwrap(), v);
    }

    #[test]
    fn packing_arithmetic() {
        let ids: Vec<usize> = (3..12).collect();
        let bs = make_batches(&ids, 4, 1, &mut RngState::new(0)).unwrap();
        assert_eq!(bs.len(), 2);
        for b in &bs {
            assert_eq!(b.mask, vec![true, true, true, false]);
            assert_eq!(&b.labels[..3], &b.tokens[1..]);
        }
        assert!(make_batches(&ids[..4], 4, 1, &mut RngState::new(0)).is_err());
    }

    #[test]
    fn batches_deterministic() {
        let ids: Vec<usize> = (0..200).map(|i| 3 + i % 7).collect();
        let a = make_batches(&ids, 8, 3, &mut RngState::new(5)).unwrap();
        let b = make_batches(&ids, 8, 3, &mut RngState::new(5)).unwrap();
        assert_eq!(a, b);
    }
}
