//! Corpus BLEU-1..4, exact-match METEOR and ROUGE-L.
//!
//! Every metric works on token sequences; [`evaluate_corpus`] applies the
//! tokenizer's normalization to raw text first so case and spacing never
//! affect a score. One reference per candidate.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::normalize_words;

pub const ROUGE_BETA: f64 = 1.2;

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut map = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *map.entry(w).or_insert(0) += 1;
        }
    }
    map
}

/// Clipped matches and total candidate n-grams for one pair.
fn clipped<T: Eq + Hash>(cand: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let matched = c
        .iter()
        .map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, cand.len().saturating_sub(n - 1))
}

fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c > r {
        1.0
    } else if c == 0 {
        0.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

/// Corpus-level BLEU-n without smoothing.
pub fn bleu_n<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>], n: usize) -> Result<f64> {
    assert!((1..=4).contains(&n), "BLEU order must be in 1..=4");
    if candidates.len() != references.len() {
        return Err(Error::LengthMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    if candidates.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (m, t) = candidates
            .iter()
            .zip(references)
            .map(|(c, r)| clipped(c, r, k))
            .fold((0, 0), |acc, x| (acc.0 + x.0, acc.1 + x.1));
        if m == 0 || t == 0 {
            return Ok(0.0);
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    let c: usize = candidates.iter().map(Vec::len).sum();
    let r: usize = references.iter().map(Vec::len).sum();
    Ok(brevity_penalty(c, r) * (log_sum / n as f64).exp())
}

/// Sentence-level BLEU with add-one smoothing on orders >= 2.
///
/// Diagnostic only; not comparable to the corpus score.
pub fn sentence_bleu_smoothed<T: Eq + Hash>(cand: &[T], reference: &[T], n: usize) -> f64 {
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (m, t) = clipped(cand, reference, k);
        let p = if k == 1 {
            if m == 0 || t == 0 {
                return 0.0;
            }
            m as f64 / t as f64
        } else {
            (m as f64 + 1.0) / (t as f64 + 1.0)
        };
        log_sum += p.ln();
    }
    brevity_penalty(cand.len(), reference.len()) * (log_sum / n as f64).exp()
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<T: Eq>(cand: &[T], reference: &[T]) -> f64 {
    rouge_l_beta(cand, reference, ROUGE_BETA)
}

/// LCS F-measure; empty input on either side scores 0.
pub fn rouge_l_beta<T: Eq>(cand: &[T], reference: &[T], beta: f64) -> f64 {
    if cand.is_empty() || reference.is_empty() {
        log::warn!("ROUGE-L on an empty sequence scores 0");
        return 0.0;
    }
    let lcs = lcs_len(cand, reference);
    if lcs == 0 {
        return 0.0;
    }
    let r = lcs as f64 / reference.len() as f64;
    let p = lcs as f64 / cand.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * r * p / (r + b2 * p)
}

/// Greedy one-to-one alignment: each candidate token, left to right, takes
/// the leftmost unused identical reference token.
fn align<T: Eq>(cand: &[T], reference: &[T]) -> Vec<Option<usize>> {
    let mut used = vec![false; reference.len()];
    cand.iter()
        .map(|tok| {
            let j = reference
                .iter()
                .enumerate()
                .position(|(j, r)| !used[j] && r == tok)?;
            used[j] = true;
            Some(j)
        })
        .collect()
}

pub fn meteor<T: Eq>(cand: &[T], reference: &[T]) -> f64 {
    if cand.is_empty() || reference.is_empty() {
        log::warn!("METEOR on an empty sequence scores 0");
        return 0.0;
    }
    let alignment = align(cand, reference);
    let m = alignment.iter().flatten().count();
    if m == 0 {
        return 0.0;
    }
    let mut chunks = 0;
    let mut prev: Option<usize> = None;
    for a in &alignment {
        match (prev, a) {
            (Some(p), Some(j)) if *j == p + 1 => {}
            (_, Some(_)) => chunks += 1,
            _ => {}
        }
        prev = *a;
    }
    let p = m as f64 / cand.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    fmean * (1.0 - penalty)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub n_examples: usize,
}

impl MetricReport {
    pub fn scores(&self) -> [f64; 6] {
        [
            self.bleu_1,
            self.bleu_2,
            self.bleu_3,
            self.bleu_4,
            self.meteor,
            self.rouge_l,
        ]
    }
}

pub const METRIC_COLUMNS: [&str; 6] = ["Bleu_1", "Bleu_2", "Bleu_3", "Bleu_4", "METEOR", "ROUGE_L"];

/// Scores token sequences directly.
pub fn evaluate_tokens<T: Eq + Hash>(outputs: &[Vec<T>], references: &[Vec<T>]) -> Result<MetricReport> {
    let bleu = |n| bleu_n(outputs, references, n);
    let n = outputs.len() as f64;
    Ok(MetricReport {
        bleu_1: bleu(1)?,
        bleu_2: bleu(2)?,
        bleu_3: bleu(3)?,
        bleu_4: bleu(4)?,
        meteor: outputs.iter().zip(references).map(|(c, r)| meteor(c, r)).sum::<f64>() / n,
        rouge_l: outputs.iter().zip(references).map(|(c, r)| rouge_l(c, r)).sum::<f64>() / n,
        n_examples: outputs.len(),
    })
}

/// Normalizes both sides with the tokenizer's word rules, then scores.
pub fn evaluate_corpus<S: AsRef<str>>(outputs: &[S], references: &[S]) -> Result<MetricReport> {
    if outputs.len() != references.len() {
        return Err(Error::LengthMismatch {
            candidates: outputs.len(),
            references: references.len(),
        });
    }
    let tok = |xs: &[S]| -> Vec<Vec<String>> { xs.iter().map(|s| normalize_words(s.as_ref())).collect() };
    evaluate_tokens(&tok(outputs), &tok(references))
}

/// One row of a results table: model family, pretraining source, scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub model: String,
    pub pretrain: String,
    pub report: MetricReport,
}

/// Fixed-width text table with the six metric columns.
pub fn format_table(rows: &[TableRow]) -> String {
    let model_w = rows.iter().map(|r| r.model.len()).chain([5]).max().unwrap_or(5);
    let pre_w = rows.iter().map(|r| r.pretrain.len()).chain([8]).max().unwrap_or(8);
    let mut out = String::new();
    let _ = write!(out, "{:<model_w$}  {:<pre_w$}", "Model", "Pretrain");
    for c in METRIC_COLUMNS {
        let _ = write!(out, "  {c:>8}");
    }
    out.push('\n');
    for row in rows {
        let _ = write!(out, "{:<model_w$}  {:<pre_w$}", row.model, row.pretrain);
        for s in row.report.scores() {
            let _ = write!(out, "  {s:>8.6}");
        }
        out.push('\n');
    }
    out
}
