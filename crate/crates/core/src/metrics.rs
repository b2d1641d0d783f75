//! Word errors and word error rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Vocabulary;

/// Word-level alignment counts of a hypothesis against a reference.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordErrorStats {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_words: usize,
}

impl WordErrorStats {
    pub fn total(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

impl std::ops::Add for WordErrorStats {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            substitutions: self.substitutions + o.substitutions,
            insertions: self.insertions + o.insertions,
            deletions: self.deletions + o.deletions,
            reference_words: self.reference_words + o.reference_words,
        }
    }
}

/// Words spelled by a label sequence: `<sos>`/`<eos>` removed, split on
/// `<sp>`, empty words dropped.
pub fn to_words(labels: &[usize], vocab: &Vocabulary) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for &l in labels {
        if l == vocab.sos() || l == vocab.eos() {
            continue;
        }
        if l == vocab.sp() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            continue;
        }
        current.push_str(vocab.symbol(l).unwrap_or("?"));
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

/// Unit-cost Levenshtein alignment of `hyp` against `reference`.
///
/// Among minimum-cost alignments the backtrace prefers substitution (or
/// match), then deletion, then insertion.
pub fn word_errors<T: PartialEq>(hyp: &[T], reference: &[T]) -> WordErrorStats {
    let (n, m) = (hyp.len(), reference.len());
    let width = m + 1;
    let mut cost = vec![0usize; (n + 1) * width];
    for j in 0..=m {
        cost[j] = j;
    }
    for i in 1..=n {
        cost[i * width] = i;
        for j in 1..=m {
            let diag = cost[(i - 1) * width + j - 1] + usize::from(hyp[i - 1] != reference[j - 1]);
            let del = cost[i * width + j - 1] + 1;
            let ins = cost[(i - 1) * width + j] + 1;
            cost[i * width + j] = diag.min(del).min(ins);
        }
    }
    let mut stats = WordErrorStats {
        reference_words: m,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = cost[i * width + j];
        if i > 0 && j > 0 {
            let mismatch = usize::from(hyp[i - 1] != reference[j - 1]);
            if cost[(i - 1) * width + j - 1] + mismatch == here {
                stats.substitutions += mismatch;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && cost[i * width + j - 1] + 1 == here {
            stats.deletions += 1;
            j -= 1;
        } else {
            stats.insertions += 1;
            i -= 1;
        }
    }
    stats
}

/// `W(y, y*)` on label sequences.
pub fn label_word_errors(hyp: &[usize], reference: &[usize], vocab: &Vocabulary) -> WordErrorStats {
    word_errors(&to_words(hyp, vocab), &to_words(reference, vocab))
}

pub fn corpus_stats<'a, I>(pairs: I) -> WordErrorStats
where
    I: IntoIterator<Item = (&'a [String], &'a [String])>,
{
    pairs
        .into_iter()
        .map(|(h, r)| word_errors(h, r))
        .fold(WordErrorStats::default(), |a, b| a + b)
}

/// Corpus WER in percent: `100 * sum(errors) / sum(reference words)`.
pub fn corpus_wer<'a, I>(pairs: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a [String], &'a [String])>,
{
    wer_percent(&corpus_stats(pairs))
}

pub fn wer_percent(stats: &WordErrorStats) -> Result<f64> {
    if stats.reference_words == 0 {
        return Err(Error::UndefinedMetric(
            "word error rate over zero reference words".into(),
        ));
    }
    Ok(100.0 * stats.total() as f64 / stats.reference_words as f64)
}
