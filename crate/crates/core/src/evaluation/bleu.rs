//! Corpus-level BLEU.
//!
//! Modified n-gram precisions are clipped per sentence pair and aggregated
//! over the corpus, combined as a uniform geometric mean and multiplied by
//! the brevity penalty `exp(min(0, 1 - r/c))` on corpus-summed lengths.
//! Orders for which the candidate side has no n-grams at all (every
//! candidate shorter than `n`) are left out of the mean.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::num::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tokenization {
    Whitespace,
    /// Every non-whitespace character is a token.
    Character,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    None,
    /// An order with zero matches uses `1 / (total + 1)` as its precision.
    AddOneOnZeroCounts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BleuConfig {
    pub max_ngram: usize,
    pub tokenization: Tokenization,
    pub smoothing: Smoothing,
}

impl Default for BleuConfig {
    fn default() -> Self {
        Self {
            max_ngram: 4,
            tokenization: Tokenization::Character,
            smoothing: Smoothing::AddOneOnZeroCounts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BleuError {
    #[error("{candidates} candidates but {references} references")]
    LengthMismatch { candidates: usize, references: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("max_ngram must be at least 1")]
    BadOrder,
}

pub fn tokenize(text: &str, mode: Tokenization) -> Vec<&str> {
    match mode {
        Tokenization::Whitespace => text.split_whitespace().collect(),
        Tokenization::Character => text
            .char_indices()
            .filter(|(_, c)| !c.is_whitespace())
            .map(|(i, c)| &text[i..i + c.len_utf8()])
            .collect(),
    }
}

fn ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Clipped matches and totals per order, plus corpus lengths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub candidate_len: usize,
    pub reference_len: usize,
}

pub fn corpus_stats<S: AsRef<str>>(
    candidates: &[S],
    references: &[S],
    config: &BleuConfig,
) -> Result<BleuStats, BleuError> {
    if candidates.len() != references.len() {
        return Err(BleuError::LengthMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    if candidates.is_empty() {
        return Err(BleuError::EmptyCorpus);
    }
    if config.max_ngram == 0 {
        return Err(BleuError::BadOrder);
    }
    let mut stats = BleuStats {
        matches: vec![0; config.max_ngram],
        totals: vec![0; config.max_ngram],
        candidate_len: 0,
        reference_len: 0,
    };
    for (cand, reference) in candidates.iter().zip(references) {
        let cand = tokenize(cand.as_ref(), config.tokenization);
        let reference = tokenize(reference.as_ref(), config.tokenization);
        stats.candidate_len += cand.len();
        stats.reference_len += reference.len();
        for n in 1..=config.max_ngram.min(cand.len()) {
            let ref_counts = ngram_counts(&reference, n);
            for (gram, count) in ngram_counts(&cand, n) {
                stats.matches[n - 1] += count.min(ref_counts.get(gram).copied().unwrap_or(0));
            }
            stats.totals[n - 1] += cand.len() + 1 - n;
        }
    }
    Ok(stats)
}

impl BleuStats {
    pub fn score<F: Scalar>(&self, smoothing: Smoothing) -> F {
        if self.candidate_len == 0 {
            return if self.reference_len == 0 { F::one() } else { F::zero() };
        }
        let mut log_sum = F::zero();
        let mut orders = 0usize;
        for (&m, &t) in self.matches.iter().zip(&self.totals) {
            if t == 0 {
                continue;
            }
            orders += 1;
            let p = match (m, smoothing) {
                (0, Smoothing::None) => return F::zero(),
                (0, Smoothing::AddOneOnZeroCounts) => F::one() / F::from_count(t + 1),
                _ => F::from_count(m) / F::from_count(t),
            };
            log_sum = log_sum + p.ln();
        }
        let c = F::from_count(self.candidate_len);
        let r = F::from_count(self.reference_len);
        let brevity = if c >= r { F::one() } else { (F::one() - r / c).exp() };
        brevity * (log_sum / F::from_count(orders)).exp()
    }
}

pub fn corpus_bleu<F: Scalar, S: AsRef<str>>(
    candidates: &[S],
    references: &[S],
    config: &BleuConfig,
) -> Result<F, BleuError> {
    Ok(corpus_stats(candidates, references, config)?.score(config.smoothing))
}
