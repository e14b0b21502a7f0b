//! Interpolated Kneser-Ney n-gram language models, ARPA interchange, and
//! n-best rescoring.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const SENT_START: &str = "<s>";
pub const SENT_END: &str = "</s>";
pub const UNKNOWN: &str = "<unk>";

type Tok = u32;

#[derive(Debug, Clone, Copy, Default)]
struct ContextStats {
    total: f64,
    types: usize,
}

/// Interpolated Kneser-Ney model with a single fixed discount.
///
/// The highest order uses raw counts; every lower order uses continuation
/// counts (number of distinct left extensions). Below unigrams the model
/// falls back to the uniform distribution over every predictable token
/// (all tokens except `<s>`).
#[derive(Debug, Clone)]
pub struct NGramLM {
    order: usize,
    discount: f64,
    tokens: Vec<String>,
    ids: HashMap<String, Tok>,
    /// `grams[k]`: k-gram (context + word) → (continuation) count.
    grams: Vec<HashMap<Vec<Tok>, f64>>,
    /// `contexts[k]`: (k−1)-token context → stats at order k.
    contexts: Vec<HashMap<Vec<Tok>, ContextStats>>,
}

impl NGramLM {
    /// Trains a model of `order` on tokenised sentences.
    pub fn train<S: AsRef<str>>(sentences: &[Vec<S>], order: usize, discount: f64) -> Result<Self> {
        if order < 1 {
            return Err(Error::invalid("n-gram order must be at least 1"));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(Error::invalid(format!("discount {discount} outside (0, 1)")));
        }
        if sentences.is_empty() {
            return Err(Error::invalid("cannot train a language model on an empty corpus"));
        }
        let mut vocab: BTreeSet<String> = BTreeSet::new();
        for s in sentences {
            for t in s {
                vocab.insert(t.as_ref().to_string());
            }
        }
        let mut tokens = vec![SENT_START.to_string(), SENT_END.to_string(), UNKNOWN.to_string()];
        tokens.extend(
            vocab
                .into_iter()
                .filter(|t| t != SENT_START && t != SENT_END && t != UNKNOWN),
        );
        let ids: HashMap<String, Tok> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as Tok))
            .collect();

        let mut lm = Self {
            order,
            discount,
            tokens,
            ids,
            grams: vec![HashMap::new(); order + 1],
            contexts: vec![HashMap::new(); order + 1],
        };

        // Raw counts of the highest order over padded sentences.
        let mut top: HashMap<Vec<Tok>, f64> = HashMap::new();
        for s in sentences {
            let padded = lm.pad(s.iter().map(|t| lm.id(t.as_ref())));
            for w in padded.windows(order) {
                if w[order - 1] == 0 {
                    continue; // <s> is never predicted
                }
                *top.entry(w.to_vec()).or_default() += 1.0;
            }
        }
        lm.grams[order] = top;
        // Continuation counts for each lower order.
        for k in (1..order).rev() {
            let mut cont: HashMap<Vec<Tok>, f64> = HashMap::new();
            for gram in lm.grams[k + 1].keys() {
                *cont.entry(gram[1..].to_vec()).or_default() += 1.0;
            }
            lm.grams[k] = cont;
        }
        for k in 1..=order {
            let mut ctx: HashMap<Vec<Tok>, ContextStats> = HashMap::new();
            for (gram, &c) in &lm.grams[k] {
                let e = ctx.entry(gram[..k - 1].to_vec()).or_default();
                e.total += c;
                e.types += 1;
            }
            lm.contexts[k] = ctx;
        }
        Ok(lm)
    }

    /// Order-0 model: uniform over `tokens` plus `</s>` and `<unk>`.
    pub fn uniform<S: AsRef<str>>(tokens: &[S]) -> Self {
        let mut set: BTreeSet<String> = tokens.iter().map(|t| t.as_ref().to_string()).collect();
        set.remove(SENT_START);
        set.remove(SENT_END);
        set.remove(UNKNOWN);
        let mut all = vec![SENT_START.to_string(), SENT_END.to_string(), UNKNOWN.to_string()];
        all.extend(set);
        let ids = all
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as Tok))
            .collect();
        Self {
            order: 0,
            discount: 0.5,
            tokens: all,
            ids,
            grams: vec![HashMap::new()],
            contexts: vec![HashMap::new()],
        }
    }

    fn pad(&self, sentence: impl Iterator<Item = Tok>) -> Vec<Tok> {
        let mut v = vec![0; self.order.saturating_sub(1)];
        v.extend(sentence);
        v.push(1);
        v
    }

    fn id(&self, token: &str) -> Tok {
        self.ids.get(token).copied().unwrap_or(2)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    /// Size of the predictable vocabulary (everything except `<s>`).
    pub fn vocab_size(&self) -> usize {
        self.tokens.len() - 1
    }

    /// Predictable tokens, in id order.
    pub fn predictable_tokens(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().skip(1).map(String::as_str)
    }

    fn prob_at(&self, k: usize, ctx: &[Tok], w: Tok) -> f64 {
        if k == 0 {
            return 1.0 / self.vocab_size() as f64;
        }
        let lower = self.prob_at(k - 1, &ctx[ctx.len().min(1)..], w);
        match self.contexts[k].get(ctx) {
            Some(st) => {
                let mut key = ctx.to_vec();
                key.push(w);
                let c = self.grams[k].get(&key).copied().unwrap_or(0.0);
                (c - self.discount).max(0.0) / st.total
                    + self.discount * st.types as f64 / st.total * lower
            }
            None => lower,
        }
    }

    fn context_ids<S: AsRef<str>>(&self, context: &[S]) -> Vec<Tok> {
        let need = self.order.saturating_sub(1);
        let mut ids: Vec<Tok> = context.iter().map(|t| self.id(t.as_ref())).collect();
        if ids.len() < need {
            let mut padded = vec![0; need - ids.len()];
            padded.extend(ids);
            ids = padded;
        }
        ids[ids.len() - need..].to_vec()
    }

    /// Natural-log probability of `token` after `context`. A context shorter
    /// than `order − 1` is treated as a sentence start.
    pub fn log_prob<S: AsRef<str>>(&self, context: &[S], token: &str) -> f64 {
        let ctx = self.context_ids(context);
        self.prob_at(self.order, &ctx, self.id(token)).ln()
    }

    /// Full conditional distribution over predictable tokens.
    pub fn distribution<S: AsRef<str>>(&self, context: &[S]) -> Vec<(String, f64)> {
        let ctx = self.context_ids(context);
        (1..self.tokens.len())
            .map(|w| (self.tokens[w].clone(), self.prob_at(self.order, &ctx, w as Tok)))
            .collect()
    }

    /// Log probability of a sentence, `</s>` included.
    pub fn sentence_log_prob<S: AsRef<str>>(&self, sentence: &[S]) -> f64 {
        let padded = self.pad(sentence.iter().map(|t| self.id(t.as_ref())));
        let n = self.order.saturating_sub(1);
        (n..padded.len())
            .map(|i| self.prob_at(self.order, &padded[i - n..i], padded[i]).ln())
            .sum()
    }

    /// `exp(−mean log prob)` over all predicted tokens including `</s>`.
    pub fn perplexity<S: AsRef<str>>(&self, sentences: &[Vec<S>]) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for s in sentences {
            total += self.sentence_log_prob(s);
            count += s.len() + 1;
        }
        (-total / count.max(1) as f64).exp()
    }

    /// Every observed context of the highest order.
    pub fn seen_contexts(&self) -> Vec<Vec<String>> {
        let mut out: Vec<Vec<String>> = self.contexts[self.order.max(1).min(self.contexts.len() - 1)]
            .keys()
            .map(|c| c.iter().map(|&t| self.tokens[t as usize].clone()).collect())
            .collect();
        out.sort();
        out
    }

    /// ARPA text dump: interpolated probabilities as log10 values, backoff
    /// weights `d · types / total` for every observed context.
    pub fn to_arpa(&self) -> String {
        let name = |g: &[Tok]| -> String {
            g.iter()
                .map(|&t| self.tokens[t as usize].as_str())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let mut sections: Vec<BTreeMap<String, (f64, Option<f64>)>> = vec![BTreeMap::new(); self.order + 1];
        for k in 1..=self.order {
            for gram in self.grams[k].keys() {
                let p = self.prob_at(k, &gram[..k - 1], gram[k - 1]);
                sections[k].insert(name(gram), (p.log10(), None));
            }
            if k == 1 {
                for (i, t) in self.tokens.iter().enumerate().skip(1) {
                    let p = self.prob_at(1, &[], i as Tok);
                    sections[1].entry(t.clone()).or_insert((p.log10(), None));
                }
            }
        }
        sections[1].insert(SENT_START.to_string(), (-99.0, None));
        for k in 2..=self.order {
            for (ctx, st) in &self.contexts[k] {
                let bow = (self.discount * st.types as f64 / st.total).log10();
                let e = sections[k - 1].entry(name(ctx)).or_insert((-99.0, None));
                e.1 = Some(bow);
            }
        }
        let mut s = String::from("\\data\\\n");
        for (k, sec) in sections.iter().enumerate().skip(1) {
            writeln!(s, "ngram {k}={}", sec.len()).unwrap();
        }
        for (k, sec) in sections.iter().enumerate().skip(1) {
            writeln!(s, "\n\\{k}-grams:").unwrap();
            for (g, (p, bow)) in sec {
                match bow {
                    Some(b) => writeln!(s, "{p:.12}\t{g}\t{b:.12}").unwrap(),
                    None => writeln!(s, "{p:.12}\t{g}").unwrap(),
                }
            }
        }
        s.push_str("\n\\end\\\n");
        s
    }
}

/// Back-off model read from an ARPA file.
#[derive(Debug, Clone)]
pub struct ArpaModel {
    order: usize,
    entries: HashMap<Vec<String>, (f64, f64)>,
}

impl ArpaModel {
    pub fn parse(text: &str) -> Result<Self> {
        let mut order = 0usize;
        let mut current: Option<usize> = None;
        let mut entries = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line == "\\data\\" || line == "\\end\\" {
                continue;
            }
            if let Some(rest) = line.strip_prefix("ngram ") {
                let (k, _) = rest
                    .split_once('=')
                    .ok_or_else(|| Error::Data(format!("arpa line {}: bad count line", i + 1)))?;
                let k: usize = k
                    .trim()
                    .parse()
                    .map_err(|_| Error::Data(format!("arpa line {}: bad order", i + 1)))?;
                order = order.max(k);
                continue;
            }
            if line.starts_with('\\') && line.ends_with("-grams:") {
                let k = line[1..line.len() - 7]
                    .parse()
                    .map_err(|_| Error::Data(format!("arpa line {}: bad section", i + 1)))?;
                current = Some(k);
                continue;
            }
            let k = current.ok_or_else(|| Error::Data(format!("arpa line {}: entry outside section", i + 1)))?;
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 2 || fields.len() > 3 {
                return Err(Error::Data(format!("arpa line {}: expected 2 or 3 fields", i + 1)));
            }
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::Data(format!("arpa line {}: bad number {s:?}", i + 1)))
            };
            let p = parse(fields[0])?;
            let bow = if fields.len() == 3 { parse(fields[2])? } else { 0.0 };
            let gram: Vec<String> = fields[1].split(' ').map(str::to_string).collect();
            if gram.len() != k {
                return Err(Error::Data(format!("arpa line {}: {}-gram in {k}-gram section", i + 1, gram.len())));
            }
            entries.insert(gram, (p, bow));
        }
        Ok(Self { order, entries })
    }

    /// Natural-log probability using standard back-off.
    pub fn log_prob<S: AsRef<str>>(&self, context: &[S], token: &str) -> f64 {
        let need = self.order.saturating_sub(1);
        let mut ctx: Vec<String> = context.iter().map(|s| s.as_ref().to_string()).collect();
        if ctx.len() < need {
            let mut padded = vec![SENT_START.to_string(); need - ctx.len()];
            padded.extend(ctx);
            ctx = padded;
        }
        let ctx = ctx[ctx.len() - need..].to_vec();
        let tok = if self.entries.contains_key(&vec![token.to_string()]) {
            token.to_string()
        } else {
            UNKNOWN.to_string()
        };
        self.backoff(&ctx, &tok) * std::f64::consts::LN_10
    }

    fn backoff(&self, ctx: &[String], w: &str) -> f64 {
        let mut gram = ctx.to_vec();
        gram.push(w.to_string());
        if let Some(&(p, _)) = self.entries.get(&gram) {
            return p;
        }
        if ctx.is_empty() {
            return -99.0;
        }
        let bow = self.entries.get(ctx).map_or(0.0, |e| e.1);
        bow + self.backoff(&ctx[1..], w)
    }
}

/// One n-best entry before rescoring.
#[derive(Debug, Clone, PartialEq)]
pub struct NBestEntry {
    pub tokens: Vec<String>,
    pub model_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rescored {
    pub entry: NBestEntry,
    pub lm_score: f64,
    pub total: f64,
}

/// Orders entries by `model_score + lm_weight · lm_score`, descending,
/// keeping the original order among equal totals.
pub fn rerank(scored: Vec<(NBestEntry, f64)>, lm_weight: f64) -> Result<Vec<Rescored>> {
    if scored.is_empty() {
        return Err(Error::invalid("cannot rescore an empty n-best list"));
    }
    let mut out: Vec<Rescored> = scored
        .into_iter()
        .map(|(entry, lm_score)| Rescored {
            total: entry.model_score + lm_weight * lm_score,
            entry,
            lm_score,
        })
        .collect();
    out.sort_by(|a, b| b.total.total_cmp(&a.total));
    Ok(out)
}

/// Adds `lm_weight` times the LM sentence log-probability to each entry and re-sorts.
pub fn rescore_nbest(lm: &NGramLM, hyps: Vec<NBestEntry>, lm_weight: f64) -> Result<Vec<Rescored>> {
    let scored = hyps
        .into_iter()
        .map(|h| {
            let l = lm.sentence_log_prob(&h.tokens);
            (h, l)
        })
        .collect();
    rerank(scored, lm_weight)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn unigram_hand_derivation() {
        // "a a b </s>": c(a)=2 c(b)=1 c(</s>)=1, N=4, 3 types, |V| = {</s>, <unk>, a, b} = 4.
        // P(a) = (2 − 0.75)/4 + 0.75·3/4 · 1/4
        let lm = NGramLM::train(&[toks("a a b")], 1, 0.75).unwrap();
        let expected = 1.25 / 4.0 + 0.75 * 3.0 / 4.0 / 4.0;
        assert!((lm.log_prob::<&str>(&[], "a").exp() - expected).abs() < 1e-15);
        // unseen token gets only the interpolated uniform share
        let unk = 0.75 * 3.0 / 4.0 / 4.0;
        assert!((lm.log_prob::<&str>(&[], "zzz").exp() - unk).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(NGramLM::train(&[toks("a")], 0, 0.75).is_err());
        assert!(NGramLM::train(&[toks("a")], 2, 1.0).is_err());
        assert!(NGramLM::train::<String>(&[], 2, 0.75).is_err());
    }

    #[test]
    fn uniform_model_closed_forms() {
        let lm = NGramLM::uniform(&["a", "b", "c"]);
        // a b c </s> <unk>
        assert_eq!(lm.vocab_size(), 5);
        assert!((lm.log_prob(&["a"], "b") - (1.0f64 / 5.0).ln()).abs() < 1e-15);
        let ppl = lm.perplexity(&[toks("a b"), toks("c")]);
        assert!((ppl - 5.0).abs() < 1e-12);
    }

    #[test]
    fn repeated_sentence_beats_uniform() {
        let data = vec![toks("x y z y"); 5];
        let lm = NGramLM::train(&data, 3, 0.75).unwrap();
        assert!(lm.perplexity(&data) < lm.vocab_size() as f64);
    }

    #[test]
    fn longer_context_never_zero() {
        let lm = NGramLM::train(&[toks("a b c"), toks("b c a")], 3, 0.75).unwrap();
        for (_, p) in lm.distribution(&["c", "b"]) {
            assert!(p > 0.0);
        }
    }

    #[test]
    fn arpa_matches_interpolated_model() {
        let data = vec![toks("a b c a"), toks("b b a c"), toks("c a b")];
        let lm = NGramLM::train(&data, 3, 0.75).unwrap();
        let arpa = ArpaModel::parse(&lm.to_arpa()).unwrap();
        let contexts = [vec![], vec!["a"], vec!["a", "b"], vec!["c", "c"], vec!["<s>", "b"], vec!["q", "a"]];
        for ctx in &contexts {
            for w in ["a", "b", "c", "</s>", "<unk>", "never"] {
                let a = lm.log_prob(ctx, w);
                let b = arpa.log_prob(ctx, w);
                assert!((a - b).abs() < 1e-9, "{ctx:?} {w}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn rescoring_identity_and_crossing() {
        let hyps = vec![
            NBestEntry { tokens: toks("a"), model_score: -1.0 },
            NBestEntry { tokens: toks("b"), model_score: -2.0 },
        ];
        // λ* = (s1 − s2) / (l2 − l1) = 1 / 2
        let lm_scores = [-4.0, -2.0];
        let run = |w: f64| -> Vec<String> {
            let scored = hyps.iter().cloned().zip(lm_scores).collect();
            rerank(scored, w).unwrap().into_iter().map(|r| r.entry.tokens[0].clone()).collect()
        };
        assert_eq!(run(0.0), ["a", "b"]);
        assert_eq!(run(0.49), ["a", "b"]);
        assert_eq!(run(0.5), ["a", "b"]); // tie keeps original order
        assert_eq!(run(0.51), ["b", "a"]);
        assert!(rerank(vec![], 1.0).is_err());
    }
}
