//! Sentence and corpus GLEU: `min(precision, recall)` over clipped n-gram
//! matches for n = 1..=max_n.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_N: usize = 4;

/// Whitespace split of a detokenized string.
pub fn metric_tokens(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GleuStats {
    pub match_count: usize,
    pub hyp_ngrams: usize,
    pub ref_ngrams: usize,
}

fn ngram_counts<S: Eq + Hash>(tokens: &[S], n: usize) -> HashMap<&[S], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

impl GleuStats {
    pub fn from_pair<S: Eq + Hash>(hyp: &[S], reference: &[S], max_n: usize) -> Result<Self> {
        if max_n == 0 {
            return Err(Error::Config("gleu: max_n must be at least 1".into()));
        }
        let mut stats = GleuStats::default();
        for n in 1..=max_n {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            stats.hyp_ngrams += hyp.len().saturating_sub(n - 1);
            stats.ref_ngrams += reference.len().saturating_sub(n - 1);
            stats.match_count += h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
        Ok(stats)
    }

    pub fn add(&mut self, other: &GleuStats) {
        self.match_count += other.match_count;
        self.hyp_ngrams += other.hyp_ngrams;
        self.ref_ngrams += other.ref_ngrams;
    }

    /// Both sides empty scores 1; one side empty scores 0.
    pub fn score(&self) -> f64 {
        match (self.hyp_ngrams, self.ref_ngrams) {
            (0, 0) => 1.0,
            (0, _) | (_, 0) => 0.0,
            (h, r) => {
                let m = self.match_count as f64;
                (m / h as f64).min(m / r as f64)
            }
        }
    }
}

pub fn gleu_sentence<S: Eq + Hash>(hyp: &[S], reference: &[S], max_n: usize) -> Result<f64> {
    Ok(GleuStats::from_pair(hyp, reference, max_n)?.score())
}

/// Micro-averaged corpus score over `(hypothesis, reference)` pairs.
pub fn gleu_corpus<S: Eq + Hash, V: AsRef<[S]>>(pairs: &[(V, V)], max_n: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Data("gleu: empty corpus".into()));
    }
    let mut total = GleuStats::default();
    for (h, r) in pairs {
        total.add(&GleuStats::from_pair(h.as_ref(), r.as_ref(), max_n)?);
    }
    Ok(total.score())
}
