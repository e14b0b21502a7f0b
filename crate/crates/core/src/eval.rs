//! Error rates and corpus BLEU.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Tokenisation used by [`wer`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unit {
    /// Whitespace-separated words.
    Word,
    /// Every non-whitespace character is one phone.
    Phone,
    /// Every character, spaces included.
    Char,
}

impl Unit {
    pub fn tokenize(self, s: &str) -> Vec<String> {
        match self {
            Unit::Word => s.split_whitespace().map(str::to_string).collect(),
            Unit::Phone => s
                .chars()
                .filter(|c| !c.is_whitespace())
                .map(String::from)
                .collect(),
            Unit::Char => s.chars().map(String::from).collect(),
        }
    }

    fn metric_name(self) -> &'static str {
        match self {
            Unit::Word => "WER",
            Unit::Phone => "PER",
            Unit::Char => "CER",
        }
    }
}

/// Corpus score plus the per-utterance breakdown it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub metric: String,
    pub corpus: f64,
    pub per_utterance: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
    /// Error rates: `[edits, reference tokens]`.
    /// BLEU: `[hyp_len, ref_len, match_1, total_1, ..., match_n, total_n]`.
    pub counts: Vec<u64>,
}

impl ScoreReport {
    /// Metric header, `utt_id value` lines, then `corpus value mean sd`.
    pub fn render(&self, ids: &[String]) -> String {
        let mut s = String::new();
        writeln!(s, "{}", self.metric).unwrap();
        for (id, v) in ids.iter().zip(&self.per_utterance) {
            writeln!(s, "{id} {v:.6}").unwrap();
        }
        writeln!(s, "corpus {:.6} {:.6} {:.6}", self.corpus, self.mean, self.sd).unwrap();
        s
    }
}

/// Unit-cost Levenshtein distance.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Corpus error rate: total edits over total reference tokens. Per-utterance
/// rates use the same ratio; an empty reference scores 0 if the hypothesis is
/// also empty and 1 otherwise. `sd` is the population standard deviation.
pub fn wer<S: AsRef<str>>(refs: &[S], hyps: &[S], unit: Unit) -> Result<ScoreReport> {
    if refs.len() != hyps.len() {
        return Err(Error::invalid(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let mut edits = 0usize;
    let mut total = 0usize;
    let mut per = Vec::with_capacity(refs.len());
    for (r, h) in refs.iter().zip(hyps) {
        let rt = unit.tokenize(r.as_ref());
        let ht = unit.tokenize(h.as_ref());
        let e = edit_distance(&rt, &ht);
        edits += e;
        total += rt.len();
        per.push(if rt.is_empty() {
            if ht.is_empty() {
                0.0
            } else {
                1.0
            }
        } else {
            e as f64 / rt.len() as f64
        });
    }
    if total == 0 {
        return Err(Error::invalid("reference corpus contains no tokens"));
    }
    let (mean, sd) = mean_sd(&per);
    Ok(ScoreReport {
        metric: unit.metric_name().to_string(),
        corpus: edits as f64 / total as f64,
        per_utterance: per,
        mean,
        sd,
        counts: vec![edits as u64, total as u64],
    })
}

fn ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_default() += 1;
        }
    }
    m
}

/// Clipped n-gram matches and hypothesis n-gram total for one sentence.
fn sentence_stats(r: &[&str], h: &[&str], max_n: usize) -> Vec<(usize, usize)> {
    (1..=max_n)
        .map(|n| {
            let rc = ngram_counts(r, n);
            let hc = ngram_counts(h, n);
            let matched = hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum();
            (matched, h.len().saturating_sub(n - 1))
        })
        .collect()
}

fn bleu_from_stats(stats: &[(usize, usize)], hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 {
        return 0.0;
    }
    let mut log_p = 0.0;
    for (i, &(m, t)) in stats.iter().enumerate() {
        let (m, t) = if i > 0 && m == 0 {
            (1.0, t as f64 + 1.0)
        } else {
            (m as f64, t as f64)
        };
        if m == 0.0 || t == 0.0 {
            return 0.0;
        }
        log_p += (m / t).ln();
    }
    log_p /= stats.len() as f64;
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    100.0 * bp * log_p.exp()
}

/// Corpus BLEU over whitespace tokens: geometric mean of clipped n-gram
/// precisions times the brevity penalty, scaled to 0..100. For `n ≥ 2`, a
/// zero match count is smoothed to `1 / (total + 1)`.
///
/// Per-utterance values are sentence BLEU under the same rule.
pub fn bleu<S: AsRef<str>>(refs: &[S], hyps: &[S], max_n: usize) -> Result<ScoreReport> {
    if refs.len() != hyps.len() {
        return Err(Error::invalid(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    if refs.is_empty() {
        return Err(Error::invalid("BLEU needs a non-empty corpus"));
    }
    if max_n == 0 {
        return Err(Error::invalid("max_n must be at least 1"));
    }
    let mut totals = vec![(0usize, 0usize); max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    let mut per = Vec::with_capacity(refs.len());
    for (r, h) in refs.iter().zip(hyps) {
        let rt: Vec<&str> = r.as_ref().split_whitespace().collect();
        let ht: Vec<&str> = h.as_ref().split_whitespace().collect();
        let s = sentence_stats(&rt, &ht, max_n);
        per.push(bleu_from_stats(&s, ht.len(), rt.len()));
        for (acc, x) in totals.iter_mut().zip(&s) {
            acc.0 += x.0;
            acc.1 += x.1;
        }
        hyp_len += ht.len();
        ref_len += rt.len();
    }
    let corpus = bleu_from_stats(&totals, hyp_len, ref_len);
    let (mean, sd) = mean_sd(&per);
    let mut counts = vec![hyp_len as u64, ref_len as u64];
    for (m, t) in totals {
        counts.push(m as u64);
        counts.push(t as u64);
    }
    Ok(ScoreReport {
        metric: format!("BLEU-{max_n}"),
        corpus,
        per_utterance: per,
        mean,
        sd,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wer_single_substitution() {
        let r = wer(&["a b c"], &["a x c"], Unit::Word).unwrap();
        assert!((r.corpus - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.counts, vec![1, 3]);
    }

    #[test]
    fn wer_identity_and_all_deletions() {
        assert_eq!(wer(&["a b", "c"], &["a b", "c"], Unit::Word).unwrap().corpus, 0.0);
        let r = wer(&["a b c"], &[""], Unit::Word).unwrap();
        assert_eq!(r.counts, vec![3, 3]);
        assert_eq!(r.corpus, 1.0);
    }

    #[test]
    fn wer_errors() {
        assert!(wer(&["a"], &["a", "b"], Unit::Word).is_err());
        assert!(wer(&[""], &["a"], Unit::Word).is_err());
    }

    #[test]
    fn phone_unit_ignores_spaces() {
        let r = wer(&["ab cd"], &["abcd"], Unit::Phone).unwrap();
        assert_eq!(r.corpus, 0.0);
        let c = wer(&["ab cd"], &["abcd"], Unit::Char).unwrap();
        assert!((c.corpus - 0.2).abs() < 1e-15);
    }

    #[test]
    fn bleu_perfect_and_brevity() {
        let r = bleu(&["a b c d e"], &["a b c d e"], 4).unwrap();
        assert_eq!(r.corpus, 100.0);
        let half = bleu(&["a b c d e f g h"], &["a b c d"], 4).unwrap();
        assert!((half.corpus - 100.0 * (-1.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn bleu_zero_unigram_matches() {
        assert_eq!(bleu(&["a b c d"], &["w x y z"], 4).unwrap().corpus, 0.0);
        assert_eq!(bleu(&["a b"], &[""], 4).unwrap().corpus, 0.0);
    }

    #[test]
    fn report_render_layout() {
        let r = wer(&["a b", "c d"], &["a b", "c x"], Unit::Word).unwrap();
        let text = r.render(&["u1".into(), "u2".into()]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "WER");
        assert_eq!(lines[1], "u1 0.000000");
        assert_eq!(lines[2], "u2 0.500000");
        assert_eq!(lines[3], "corpus 0.250000 0.250000 0.250000");
    }
}
