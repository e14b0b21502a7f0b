//! Greedy and beam search, CTC collapsing, and the repetition guard.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::tensor::{argmax, Matrix};

/// Autoregressive next-token distribution.
pub trait StepScorer {
    fn eos(&self) -> usize;
    /// Log-probabilities over the vocabulary after `prefix` (generated tokens only).
    fn next_log_probs(&self, prefix: &[usize]) -> Vec<f64>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    fn empty() -> Self {
        Self {
            tokens: Vec::new(),
            score: 0.0,
            finished: false,
        }
    }

    /// Tokens without the trailing end-of-sequence marker.
    pub fn content(&self) -> &[usize] {
        if self.finished {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }
}

/// Argmax decoding until `eos` or `max_len` tokens; ties go to the lowest id.
pub fn greedy_decode<S: StepScorer + ?Sized>(scorer: &S, max_len: usize) -> Hypothesis {
    let mut h = Hypothesis::empty();
    while h.tokens.len() < max_len {
        let lp = scorer.next_log_probs(&h.tokens);
        let tok = argmax(&lp);
        h.score += lp[tok];
        h.tokens.push(tok);
        if tok == scorer.eos() {
            h.finished = true;
            break;
        }
    }
    h
}

/// Length-synchronous beam search without length normalisation.
///
/// Finished hypotheses stay in the beam and compete on raw score. Candidates
/// are ranked with a stable sort, so among equal scores earlier beams and
/// lower token ids win; with `beam = 1` this reproduces [`greedy_decode`].
pub fn beam_search<S: StepScorer + ?Sized>(scorer: &S, beam: usize, max_len: usize) -> Vec<Hypothesis> {
    let beam = beam.max(1);
    let eos = scorer.eos();
    let mut beams = vec![Hypothesis::empty()];
    for _ in 0..max_len {
        if beams.iter().all(|h| h.finished) {
            break;
        }
        let mut cands = Vec::with_capacity(beams.len() * 8);
        for h in &beams {
            if h.finished {
                cands.push(h.clone());
                continue;
            }
            let lp = scorer.next_log_probs(&h.tokens);
            for (tok, &l) in lp.iter().enumerate() {
                let mut tokens = h.tokens.clone();
                tokens.push(tok);
                cands.push(Hypothesis {
                    tokens,
                    score: h.score + l,
                    finished: tok == eos,
                });
            }
        }
        cands.sort_by(|a, b| b.score.total_cmp(&a.score));
        cands.truncate(beam);
        beams = cands;
    }
    beams
}

/// Merges repeated labels, then removes blanks.
pub fn ctc_collapse(frame_ids: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &id in frame_ids {
        if Some(id) != prev && id != blank {
            out.push(id);
        }
        prev = Some(id);
    }
    out
}

/// Per-frame argmax followed by [`ctc_collapse`].
pub fn ctc_greedy(log_probs: &Matrix, blank: usize) -> Vec<usize> {
    let path: Vec<usize> = (0..log_probs.rows()).map(|t| log_probs.argmax_row(t)).collect();
    ctc_collapse(&path, blank)
}

/// N-best label sequences from a beam over single alignment paths.
///
/// Paths sharing a collapsed prefix and last frame label are merged by
/// keeping the better score (max, not sum). Returns distinct collapsed
/// sequences with their best path score, best first.
pub fn ctc_path_nbest(log_probs: &Matrix, blank: usize, beam: usize) -> Vec<(Vec<usize>, f64)> {
    let beam = beam.max(1);
    // (collapsed, last label) -> score
    let mut paths: Vec<((Vec<usize>, Option<usize>), f64)> = vec![((Vec::new(), None), 0.0)];
    for t in 0..log_probs.rows() {
        let row = log_probs.row(t);
        let mut next: HashMap<(Vec<usize>, Option<usize>), f64> = HashMap::new();
        let mut order: Vec<(Vec<usize>, Option<usize>)> = Vec::new();
        for ((prefix, last), score) in &paths {
            for (k, &lp) in row.iter().enumerate() {
                let mut p = prefix.clone();
                if k != blank && Some(k) != *last {
                    p.push(k);
                }
                let key = (p, Some(k));
                let s = score + lp;
                match next.get_mut(&key) {
                    Some(v) => {
                        if s > *v {
                            *v = s;
                        }
                    }
                    None => {
                        order.push(key.clone());
                        next.insert(key, s);
                    }
                }
            }
        }
        let mut ranked: Vec<_> = order
            .into_iter()
            .map(|k| {
                let s = next[&k];
                (k, s)
            })
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
        ranked.truncate(beam);
        paths = ranked;
    }
    let mut best: Vec<(Vec<usize>, f64)> = Vec::new();
    for ((prefix, _), s) in paths {
        match best.iter_mut().find(|(p, _)| *p == prefix) {
            Some(e) => e.1 = e.1.max(s),
            None => best.push((prefix, s)),
        }
    }
    best.sort_by(|a, b| b.1.total_cmp(&a.1));
    best
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuardOutcome {
    pub tokens: Vec<usize>,
    pub truncated: bool,
}

/// Cuts a hypothesis whose `n`-gram repeats back-to-back more than
/// `max_repeats` times: everything after the `max_repeats`-th copy is
/// dropped and `eos` appended.
pub fn repetition_guard(tokens: &[usize], eos: usize, n: usize, max_repeats: usize) -> GuardOutcome {
    assert!(n >= 1, "n-gram size must be positive");
    let len = tokens.len();
    for start in 0..len {
        if start + n > len {
            break;
        }
        let gram = &tokens[start..start + n];
        if gram.contains(&eos) {
            continue;
        }
        let mut copies = 1;
        while start + (copies + 1) * n <= len && &tokens[start + copies * n..start + (copies + 1) * n] == gram {
            copies += 1;
        }
        if copies > max_repeats {
            let mut out = tokens[..start + max_repeats * n].to_vec();
            out.push(eos);
            return GuardOutcome {
                tokens: out,
                truncated: true,
            };
        }
    }
    GuardOutcome {
        tokens: tokens.to_vec(),
        truncated: false,
    }
}

/// `<utt_id> <rank> <score> <text>` lines, rank starting at 1.
pub fn render_nbest(utt_id: &str, entries: &[(String, f64)]) -> String {
    let mut s = String::new();
    for (rank, (text, score)) in entries.iter().enumerate() {
        writeln!(s, "{utt_id} {} {score:.6} {text}", rank + 1).unwrap();
    }
    s
}
