//! Character vocabularies and byte-pair-encoding subword models.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
pub const BLANK: &str = "<blank>";

/// Marker that stands in for a space inside subword units.
pub const SPACE_MARK: char = '▁';
/// Rendering of an unknown id when decoding.
pub const UNK_TEXT: &str = "⟨unk⟩";

/// Ordered symbol table with reserved specials at the front.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    symbols: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    pad: usize,
    bos: usize,
    eos: usize,
    unk: usize,
    blank: Option<usize>,
}

impl Vocabulary {
    /// Builds a vocabulary: specials first (`pad bos eos unk [blank]`), then
    /// `symbols` in the given order.
    pub fn new(symbols: impl IntoIterator<Item = String>, with_blank: bool) -> Result<Self> {
        let mut all: Vec<String> = vec![PAD.into(), BOS.into(), EOS.into(), UNK.into()];
        if with_blank {
            all.push(BLANK.into());
        }
        all.extend(symbols);
        let mut index = HashMap::with_capacity(all.len());
        for (i, s) in all.iter().enumerate() {
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary symbol {s:?}")));
            }
        }
        Ok(Self {
            symbols: all,
            index,
            pad: 0,
            bos: 1,
            eos: 2,
            unk: 3,
            blank: with_blank.then_some(4),
        })
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn pad(&self) -> usize {
        self.pad
    }
    pub fn bos(&self) -> usize {
        self.bos
    }
    pub fn eos(&self) -> usize {
        self.eos
    }
    pub fn unk(&self) -> usize {
        self.unk
    }
    pub fn blank(&self) -> Option<usize> {
        self.blank
    }

    /// Number of leading reserved entries.
    pub fn n_reserved(&self) -> usize {
        if self.blank.is_some() {
            5
        } else {
            4
        }
    }

    pub fn is_reserved(&self, id: usize) -> bool {
        id < self.n_reserved()
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn id_or_unk(&self, symbol: &str) -> usize {
        self.id(symbol).unwrap_or(self.unk)
    }

    pub fn symbol(&self, id: usize) -> Result<&str> {
        self.symbols
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::invalid(format!("token id {id} out of range (|V| = {})", self.len())))
    }

    /// Maps each character to its id (unknown characters become `unk`).
    pub fn encode_chars(&self, text: &str) -> Vec<usize> {
        text.chars()
            .map(|c| {
                let mut buf = [0u8; 4];
                self.id_or_unk(c.encode_utf8(&mut buf))
            })
            .collect()
    }

    /// Inverse of [`Self::encode_chars`]; reserved ids other than `unk` are skipped.
    pub fn decode_chars(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let s = self.symbol(id)?;
            if id == self.unk {
                out.push_str(UNK_TEXT);
            } else if !self.is_reserved(id) {
                out.push_str(s);
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("vocabulary serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let mut v: Vocabulary =
            serde_json::from_str(s).map_err(|e| Error::Data(format!("vocabulary json: {e}")))?;
        v.rebuild_index();
        if v.index.len() != v.symbols.len() {
            return Err(Error::Data("vocabulary has duplicate symbols".into()));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_json(&s)
    }
}

/// Character vocabulary for CTC targets: specials (including blank) plus the
/// sorted set of distinct characters. Whitespace is kept as a symbol.
pub fn train_char_vocab<S: AsRef<str>>(texts: &[S]) -> Result<Vocabulary> {
    if texts.is_empty() {
        return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
    }
    let chars: BTreeSet<char> = texts.iter().flat_map(|t| t.as_ref().chars()).collect();
    Vocabulary::new(chars.into_iter().map(String::from), true)
}

/// Trained BPE merge table plus the resulting vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    vocab: Vocabulary,
    target_size: usize,
}

fn to_units(text: &str) -> Vec<String> {
    text.chars()
        .map(|c| if c == ' ' { SPACE_MARK.to_string() } else { c.to_string() })
        .collect()
}

/// Learns BPE merges over whole sentences (spaces become [`SPACE_MARK`]).
///
/// Each round merges the most frequent adjacent pair, ties broken by the
/// lexicographically smallest pair. Training stops once the vocabulary
/// reaches `target_size` or no pair occurs at least twice.
pub fn train_bpe<S: AsRef<str>>(texts: &[S], target_size: usize) -> Result<SubwordModel> {
    if texts.is_empty() {
        return Err(Error::invalid("cannot train BPE on an empty corpus"));
    }
    // Unique sentences with multiplicities.
    let mut sentence_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in texts {
        *sentence_counts.entry(t.as_ref()).or_default() += 1;
    }
    let mut seqs: Vec<(Vec<String>, usize)> = sentence_counts
        .into_iter()
        .map(|(s, n)| (to_units(s), n))
        .collect();
    let base: BTreeSet<String> = seqs.iter().flat_map(|(s, _)| s.iter().cloned()).collect();
    let reserved = 4;
    if target_size <= base.len() + reserved {
        return Err(Error::invalid(format!(
            "target_size {target_size} must exceed base charset {} + {reserved} reserved",
            base.len()
        )));
    }
    let mut symbols: Vec<String> = base.into_iter().collect();
    let mut known: BTreeSet<String> = symbols.iter().cloned().collect();
    let mut merges = Vec::new();

    while known.len() + reserved < target_size {
        let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (seq, n) in &seqs {
            for w in seq.windows(2) {
                *counts.entry((w[0].as_str(), w[1].as_str())).or_default() += n;
            }
        }
        // BTreeMap iterates pairs in lexicographic order, so the first
        // maximum wins ties.
        let mut best: Option<((&str, &str), usize)> = None;
        for (&pair, &c) in &counts {
            if best.map_or(true, |(_, bc)| c > bc) {
                best = Some((pair, c));
            }
        }
        let Some(((l, r), count)) = best else { break };
        if count < 2 {
            break;
        }
        let (l, r) = (l.to_string(), r.to_string());
        let merged = format!("{l}{r}");
        for (seq, _) in &mut seqs {
            *seq = apply_merge(seq, &l, &r, &merged);
        }
        if known.insert(merged.clone()) {
            symbols.push(merged);
        }
        merges.push((l, r));
    }

    let vocab = Vocabulary::new(symbols, false)?;
    Ok(SubwordModel::from_parts(merges, vocab, target_size))
}

fn apply_merge(seq: &[String], l: &str, r: &str, merged: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == l && seq[i + 1] == r {
            out.push(merged.to_string());
            i += 2;
        } else {
            out.push(seq[i].clone());
            i += 1;
        }
    }
    out
}

impl SubwordModel {
    fn from_parts(merges: Vec<(String, String)>, vocab: Vocabulary, target_size: usize) -> Self {
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        Self {
            merges,
            ranks,
            vocab,
            target_size,
        }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn target_size(&self) -> usize {
        self.target_size
    }

    /// Splits `text` into subword units by repeatedly applying the
    /// lowest-ranked applicable merge.
    pub fn segment(&self, text: &str) -> Vec<String> {
        let mut seq = to_units(text);
        loop {
            let best = seq
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())))
                .min()
                .copied();
            let Some(rank) = best else { break };
            let (l, r) = &self.merges[rank];
            let merged = format!("{l}{r}");
            seq = apply_merge(&seq, l, r, &merged);
        }
        seq
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        self.segment(text)
            .iter()
            .map(|u| self.vocab.id_or_unk(u))
            .collect()
    }

    /// Concatenates units and restores spaces; specials other than `unk` are dropped.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let s = self.vocab.symbol(id)?;
            if id == self.vocab.unk() {
                out.push_str(UNK_TEXT);
            } else if !self.vocab.is_reserved(id) {
                out.extend(s.chars().map(|c| if c == SPACE_MARK { ' ' } else { c }));
            }
        }
        Ok(out)
    }

    /// Line 1: space-separated vocabulary; then one `left right` merge per line.
    pub fn to_text(&self) -> String {
        let mut s = self.vocab.symbols().join(" ");
        s.push('\n');
        for (l, r) in &self.merges {
            s.push_str(l);
            s.push(' ');
            s.push_str(r);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Data("empty subword model file".into()))?;
        let symbols: Vec<&str> = first.split(' ').filter(|s| !s.is_empty()).collect();
        let specials = [PAD, BOS, EOS, UNK];
        if symbols.len() < 4 || symbols[..4] != specials {
            return Err(Error::Data(
                "subword vocabulary must start with the reserved symbols".into(),
            ));
        }
        let vocab = Vocabulary::new(symbols[4..].iter().map(|s| s.to_string()), false)?;
        let mut merges = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    merges.push((l.to_string(), r.to_string()))
                }
                _ => {
                    return Err(Error::Data(format!(
                        "subword model line {}: expected `left right`",
                        i + 2
                    )))
                }
            }
        }
        let target = vocab.len();
        Ok(Self::from_parts(merges, vocab, target))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_text(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn char_vocab_is_sorted_chars_plus_reserved() {
        let v = train_char_vocab(&["ab", "ba"]).unwrap();
        assert_eq!(v.len(), 2 + 5);
        assert_eq!(&v.symbols()[5..], &["a".to_string(), "b".to_string()]);
        assert_eq!(v.blank(), Some(4));
        let w = train_char_vocab(&["a b"]).unwrap();
        assert!(w.id(" ").is_some());
        assert!(train_char_vocab::<&str>(&[]).is_err());
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        let m = train_bpe(&["abab abab"], 100).unwrap();
        assert_eq!(m.merges()[0], ("a".to_string(), "b".to_string()));
    }

    #[test]
    fn minimal_target_gives_one_merge() {
        // base = {a, b, ▁}
        let m = train_bpe(&["abab abab"], 3 + 4 + 1).unwrap();
        assert_eq!(m.merges().len(), 1);
        assert!(train_bpe(&["abab abab"], 3 + 4).is_err());
    }

    #[test]
    fn tie_breaks_lexicographically() {
        // (a,b) and (b,a) both occur twice
        let m = train_bpe(&["aba", "bab"], 100).unwrap();
        assert_eq!(m.merges()[0], ("a".to_string(), "b".to_string()));
    }

    #[test]
    fn encode_applies_merge() {
        let m = train_bpe(&["abab abab"], 8).unwrap();
        assert_eq!(m.encode("abab").len(), 2);
        assert_eq!(m.decode(&m.encode("abab")).unwrap(), "abab");
    }

    #[test]
    fn unknown_character_maps_to_unk() {
        let m = train_bpe(&["abab abab"], 8).unwrap();
        let ids = m.encode("abz");
        assert_eq!(*ids.last().unwrap(), m.vocab().unk());
        assert_eq!(m.decode(&ids).unwrap(), format!("ab{UNK_TEXT}"));
        assert!(m.decode(&[999]).is_err());
    }

    #[test]
    fn model_file_round_trip() {
        let m = train_bpe(&["lo ka lo mi", "ka mi mi lo"], 20).unwrap();
        let back = SubwordModel::from_text(&m.to_text()).unwrap();
        assert_eq!(back.merges(), m.merges());
        assert_eq!(back.vocab(), m.vocab());
        assert!(SubwordModel::from_text("<pad> <s> </s> <unk> a\na b c\n").is_err());
    }

    proptest! {
        #[test]
        fn round_trip_and_size_bound(
            texts in proptest::collection::vec("[abc ]{1,12}", 1..8),
            target in 12usize..40,
        ) {
            let model = match train_bpe(&texts, target) {
                Ok(m) => m,
                Err(_) => return Ok(()),
            };
            prop_assert!(model.vocab().len() <= target);
            for t in &texts {
                prop_assert_eq!(&model.decode(&model.encode(t)).unwrap(), t);
            }
            let again = train_bpe(&texts, target).unwrap();
            prop_assert_eq!(again.merges(), model.merges());
        }
    }
}
