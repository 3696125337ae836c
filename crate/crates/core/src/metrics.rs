//! Corpus BLEU (tokenized, case-sensitive, single reference) and token accuracy.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const MAX_ORDER: usize = 4;

/// Sufficient statistics for corpus BLEU; additive across sentences.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    /// Clipped n-gram matches per order 1..=4.
    pub matches: [u64; MAX_ORDER],
    /// Hypothesis n-gram counts per order 1..=4.
    pub totals: [u64; MAX_ORDER],
    pub hyp_len: u64,
    pub ref_len: u64,
}

fn ngram_counts<S: AsRef<str>>(toks: &[S], n: usize) -> HashMap<Vec<&str>, u64> {
    let mut counts = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *counts
                .entry(w.iter().map(AsRef::as_ref).collect())
                .or_default() += 1;
        }
    }
    counts
}

impl BleuStats {
    pub fn from_sentence<S: AsRef<str>, T: AsRef<str>>(hyp: &[S], reference: &[T]) -> Self {
        let mut stats = BleuStats {
            hyp_len: hyp.len() as u64,
            ref_len: reference.len() as u64,
            ..Default::default()
        };
        for n in 1..=MAX_ORDER {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            stats.totals[n - 1] = hyp.len().saturating_sub(n - 1) as u64;
            stats.matches[n - 1] = h
                .iter()
                .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
                .sum();
        }
        stats
    }

    pub fn add(&mut self, other: &BleuStats) {
        for n in 0..MAX_ORDER {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    /// BLEU in `[0, 100]` with its components.
    ///
    /// An order with no hypothesis n-grams at all contributes a neutral
    /// factor; an order with n-grams but no matches makes the score 0.
    pub fn score(&self) -> Bleu {
        let mut precisions = [0.0; MAX_ORDER];
        let mut log_sum = 0.0;
        let mut zero = self.hyp_len == 0;
        for (n, slot) in precisions.iter_mut().enumerate() {
            if self.totals[n] == 0 {
                *slot = 1.0;
                continue;
            }
            let p = self.matches[n] as f64 / self.totals[n] as f64;
            *slot = p;
            if p == 0.0 {
                zero = true;
            } else {
                log_sum += p.ln();
            }
        }
        let (c, r) = (self.hyp_len as f64, self.ref_len as f64);
        let bp = if c == 0.0 {
            0.0
        } else if c > r {
            1.0
        } else {
            (1.0 - r / c).exp()
        };
        let score = if zero {
            0.0
        } else {
            100.0 * bp * (log_sum / MAX_ORDER as f64).exp()
        };
        Bleu {
            score,
            precisions,
            brevity_penalty: bp,
            ratio: if r == 0.0 { 0.0 } else { c / r },
            hyp_len: self.hyp_len,
            ref_len: self.ref_len,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bleu {
    pub score: f64,
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub ratio: f64,
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl fmt::Display for Bleu {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = self.precisions.map(|v| v * 100.0);
        write!(
            f,
            "BLEU = {:.2} ({:.1}/{:.1}/{:.1}/{:.1}, BP={:.3}, ratio={:.3}, hyp_len={}, ref_len={})",
            self.score,
            p[0],
            p[1],
            p[2],
            p[3],
            self.brevity_penalty,
            self.ratio,
            self.hyp_len,
            self.ref_len
        )
    }
}

/// Corpus-level BLEU over tokenized sentences, one reference each.
pub fn corpus_bleu<S: AsRef<str>, T: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<T>]) -> Result<Bleu> {
    if hyps.len() != refs.len() {
        return Err(Error::Contract(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::Contract("BLEU of an empty corpus".into()));
    }
    let mut stats = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        stats.add(&BleuStats::from_sentence(h, r));
    }
    Ok(stats.score())
}

/// Fraction of non-pad positions where `predictions` equals `targets`.
pub fn token_accuracy(predictions: &[u32], targets: &[u32], pad_id: u32) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::shape(
            "token_accuracy",
            &[predictions.len()],
            &[targets.len()],
        ));
    }
    let mut total = 0usize;
    let mut correct = 0usize;
    for (&p, &t) in predictions.iter().zip(targets) {
        if t == pad_id {
            continue;
        }
        total += 1;
        if p == t {
            correct += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(correct as f64 / total as f64)
}

/// Index of the largest entry per row (first one on ties).
pub fn argmax_rows<F: Float>(logits: &Tensor<F>) -> Vec<u32> {
    let (_, cols) = logits.rows_cols();
    logits
        .data()
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best as u32
        })
        .collect()
}
