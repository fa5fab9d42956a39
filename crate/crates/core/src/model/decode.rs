//! Greedy and beam decoding.

use super::net::{motion_matrix, Encoded, Net};
use super::params::ModelParameters;
use crate::error::{Error, Result};
use crate::skeleton::MotionClip;
use crate::tokenizer::{BOS, EOS};

/// Encoder output kept on the tape while decoder prefixes come and go.
struct Session<'p> {
    net: Net<'p>,
    enc: Encoded,
    base: usize,
}

impl<'p> Session<'p> {
    fn new(params: &'p ModelParameters, clip: &MotionClip) -> Self {
        let frames = motion_matrix(clip, params.config.max_frames);
        let mut net = Net::new(params);
        let enc = net.encode(&frames, frames.rows);
        let base = net.g.len();
        Session { net, enc, base }
    }

    /// Log-probabilities of the token following `prefix`.
    fn next_log_probs(&mut self, prefix: &[usize]) -> Vec<f64> {
        self.net.g.truncate(self.base);
        let out = self.net.decode(&self.enc, prefix);
        let logits = self.net.g.value(out);
        log_softmax(logits.row(logits.rows - 1))
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Lowest id among the maximal entries.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn step_cap(params: &ModelParameters, max_tokens: usize) -> usize {
    max_tokens.min(params.config.max_tokens)
}

/// Greedy decoding. The result starts with BOS and holds at most
/// `max_tokens` generated tokens, the last being EOS unless the cap hit.
pub fn greedy_decode(params: &ModelParameters, clip: &MotionClip, max_tokens: usize) -> Vec<usize> {
    let mut s = Session::new(params, clip);
    let mut seq = vec![BOS];
    for _ in 0..step_cap(params, max_tokens) {
        let next = argmax(&s.next_log_probs(&seq));
        seq.push(next);
        if next == EOS {
            break;
        }
    }
    seq
}

#[derive(Clone, Debug)]
struct Hyp {
    seq: Vec<usize>,
    log_prob: f64,
}

impl Hyp {
    fn score(&self) -> f64 {
        self.log_prob / (self.seq.len() - 1) as f64
    }
}

/// Beam search ranked by length-normalized log-probability (mean per
/// generated token). Finished hypotheses are never pruned; the best of
/// them, or of the survivors at the length cap, is returned.
///
/// With `beam == 1` this is exactly [`greedy_decode`].
pub fn beam_decode(params: &ModelParameters, clip: &MotionClip, beam: usize, max_tokens: usize) -> Result<Vec<usize>> {
    if beam == 0 {
        return Err(Error::InvalidConfig("beam width must be at least 1".into()));
    }
    let cap = step_cap(params, max_tokens);
    if cap == 0 {
        return Ok(vec![BOS]);
    }
    let mut s = Session::new(params, clip);
    let mut alive = vec![Hyp {
        seq: vec![BOS],
        log_prob: 0.0,
    }];
    let mut finished: Vec<Hyp> = Vec::new();
    for _ in 0..cap {
        // (hyp index, token, summed log-prob); stable sort keeps the
        // lower hypothesis index and then the lower token id on ties.
        let mut cands = Vec::with_capacity(alive.len() * params.config.vocab_size);
        for (h, hyp) in alive.iter().enumerate() {
            let lp = s.next_log_probs(&hyp.seq);
            for (tok, l) in lp.into_iter().enumerate() {
                cands.push((h, tok, hyp.log_prob + l));
            }
        }
        cands.sort_by(|a, b| b.2.total_cmp(&a.2));
        let mut next = Vec::with_capacity(beam);
        for &(h, tok, lp) in cands.iter().take(beam) {
            let mut seq = alive[h].seq.clone();
            seq.push(tok);
            let hyp = Hyp { seq, log_prob: lp };
            if tok == EOS {
                finished.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        alive = next;
        if alive.is_empty() {
            break;
        }
    }
    finished.extend(alive);
    let best = finished
        .into_iter()
        .reduce(|best, h| if h.score() > best.score() { h } else { best })
        .expect("at least one hypothesis survives");
    Ok(best.seq)
}

/// Length-normalized log-probability of a decoded sequence (BOS first).
pub fn sequence_score(params: &ModelParameters, clip: &MotionClip, seq: &[usize]) -> Result<f64> {
    if seq.first() != Some(&BOS) || seq.len() < 2 {
        return Err(Error::InvalidTarget("sequence must start with BOS and hold a token".into()));
    }
    let mut s = Session::new(params, clip);
    let mut total = 0.0;
    for k in 1..seq.len() {
        total += s.next_log_probs(&seq[..k])[seq[k]];
    }
    Ok(total / (seq.len() - 1) as f64)
}
