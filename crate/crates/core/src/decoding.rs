//! Beam search, ancestral sampling and exhaustive enumeration.
//!
//! A hypothesis either ends at its first `<eos>` or is cut off after
//! `max_len` emitted labels; both kinds are scored with their exact
//! `log P(y | x)`. Hypothesis generation only ever sees encoder output, never
//! a reference transcript.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DecoderState, EncodedFeatures, ModelParams, Vocabulary};

/// Upper bound on `output_size ^ max_len` accepted by [`enumerate_all`].
pub const ENUMERATION_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Labels including the leading `<sos>`.
    pub labels: Vec<usize>,
    pub log_prob: f64,
    pub complete: bool,
}

impl Hypothesis {
    /// Number of emitted labels (excluding `<sos>`).
    pub fn len(&self) -> usize {
        self.labels.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn terminated(&self, vocab: &Vocabulary) -> bool {
        self.labels.last() == Some(&vocab.eos())
    }
}

/// Higher score first, then lexicographically smaller labels.
fn rank(a_score: f64, a_labels: &[usize], b_score: f64, b_labels: &[usize]) -> Ordering {
    b_score
        .total_cmp(&a_score)
        .then_with(|| a_labels.cmp(b_labels))
}

fn sort_hypotheses(hyps: &mut [Hypothesis]) {
    hyps.sort_by(|a, b| rank(a.log_prob, &a.labels, b.log_prob, &b.labels));
}

/// Up to `beam_size` hypotheses, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct NBestList {
    pub hypotheses: Vec<Hypothesis>,
    pub beam_size: usize,
}

impl NBestList {
    pub fn best(&self) -> &Hypothesis {
        &self.hypotheses[0]
    }

    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }
}

/// Default decode length bound for an input of `frames` frames.
pub fn default_max_len(frames: usize) -> usize {
    2 * frames + 10
}

struct Live {
    labels: Vec<usize>,
    score: f64,
    state: DecoderState,
}

/// Breadth-wise beam search with raw (unnormalized) log-probability scores.
///
/// Every step expands each live hypothesis over all emittable labels and keeps
/// the best `beam_size` expansions. Expansions ending in `<eos>` or reaching
/// `max_len` retire into the finished pool. Search stops once `beam_size`
/// finished hypotheses score at least as well as every live one.
pub fn beam_search(
    model: &ModelParams,
    enc: &EncodedFeatures,
    beam_size: usize,
    max_len: usize,
) -> Result<NBestList> {
    if beam_size == 0 || max_len == 0 {
        return Err(Error::Contract("beam size and max_len must be positive".into()));
    }
    let vocab = &model.vocab;
    let mut live = vec![Live {
        labels: vec![vocab.sos()],
        score: 0.0,
        state: model.initial_state(),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 1..=max_len {
        let mut candidates: Vec<(usize, usize, f64, DecoderState)> = Vec::new();
        let mut expansions: Vec<(usize, usize, f64)> = Vec::new();
        let mut states = Vec::with_capacity(live.len());
        for (parent, hyp) in live.iter().enumerate() {
            let out = model.decode_step(enc, *hyp.labels.last().unwrap(), &hyp.state)?;
            for g in vocab.emittable() {
                expansions.push((parent, g, hyp.score + out.log_probs[g]));
            }
            states.push(out.state);
        }
        expansions.sort_by(|a, b| {
            b.2.total_cmp(&a.2)
                .then_with(|| live[a.0].labels.cmp(&live[b.0].labels))
                .then_with(|| a.1.cmp(&b.1))
        });
        expansions.truncate(beam_size);
        for (parent, g, score) in expansions {
            candidates.push((parent, g, score, states[parent].clone()));
        }
        let mut next = Vec::with_capacity(candidates.len());
        for (parent, g, score, state) in candidates {
            let mut labels = live[parent].labels.clone();
            labels.push(g);
            if g == vocab.eos() || step == max_len {
                finished.push(Hypothesis {
                    labels,
                    log_prob: score,
                    complete: true,
                });
            } else {
                next.push(Live {
                    labels,
                    score,
                    state,
                });
            }
        }
        live = next;
        sort_hypotheses(&mut finished);
        let best_live = live.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        if live.is_empty() || (finished.len() >= beam_size && finished[beam_size - 1].log_prob >= best_live) {
            break;
        }
    }
    finished.truncate(beam_size);
    Ok(NBestList {
        hypotheses: finished,
        beam_size,
    })
}

/// Draw one label index from log-probabilities over `candidates`.
fn draw<R: Rng>(rng: &mut R, log_probs: &[f64], candidates: &[usize]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = candidates[0];
    for &g in candidates {
        let p = log_probs[g].exp();
        if p > 0.0 {
            last_positive = g;
        }
        acc += p;
        if u < acc {
            return g;
        }
    }
    last_positive
}

/// `count` independent ancestral samples from the model.
pub fn sample_sequences_with<R: Rng>(
    model: &ModelParams,
    enc: &EncodedFeatures,
    count: usize,
    max_len: usize,
    rng: &mut R,
) -> Result<Vec<Hypothesis>> {
    if count == 0 || max_len == 0 {
        return Err(Error::Contract("sample count and max_len must be positive".into()));
    }
    let vocab = &model.vocab;
    let candidates: Vec<usize> = vocab.emittable().collect();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut labels = vec![vocab.sos()];
        let mut state = model.initial_state();
        let mut log_prob = 0.0;
        for _ in 0..max_len {
            let step = model.decode_step(enc, *labels.last().unwrap(), &state)?;
            let g = draw(rng, &step.log_probs, &candidates);
            log_prob += step.log_probs[g];
            labels.push(g);
            state = step.state;
            if g == vocab.eos() {
                break;
            }
        }
        out.push(Hypothesis {
            labels,
            log_prob,
            complete: true,
        });
    }
    Ok(out)
}

/// Seeded form of [`sample_sequences_with`].
pub fn sample_sequences(
    model: &ModelParams,
    enc: &EncodedFeatures,
    count: usize,
    max_len: usize,
    seed: u64,
) -> Result<Vec<Hypothesis>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_sequences_with(model, enc, count, max_len, &mut rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnumeratedSequence {
    pub labels: Vec<usize>,
    pub log_prob: f64,
    /// Ended with `<eos>`; otherwise cut off at `max_len`.
    pub terminated: bool,
}

impl EnumeratedSequence {
    pub fn prob(&self) -> f64 {
        self.log_prob.exp()
    }
}

/// Every hypothesis of length at most `max_len` with its exact probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Enumeration {
    pub sequences: Vec<EnumeratedSequence>,
    pub max_len: usize,
}

impl Enumeration {
    pub fn terminated(&self) -> impl Iterator<Item = &EnumeratedSequence> {
        self.sequences.iter().filter(|s| s.terminated)
    }

    /// Probability mass of sequences ending in `<eos>`.
    pub fn terminated_mass(&self) -> f64 {
        self.terminated().map(EnumeratedSequence::prob).sum()
    }

    /// Probability mass of length-`max_len` prefixes without `<eos>`.
    pub fn residual(&self) -> f64 {
        self.sequences
            .iter()
            .filter(|s| !s.terminated)
            .map(EnumeratedSequence::prob)
            .sum()
    }

    /// Highest-probability hypothesis (ties: lexicographically smallest).
    pub fn argmax(&self) -> &EnumeratedSequence {
        self.sequences
            .iter()
            .min_by(|a, b| rank(a.log_prob, &a.labels, b.log_prob, &b.labels))
            .expect("enumeration is never empty")
    }
}

/// Exhaustively enumerate the hypothesis space. Guarded so that
/// `output_size ^ max_len` stays below [`ENUMERATION_LIMIT`].
pub fn enumerate_all(model: &ModelParams, enc: &EncodedFeatures, max_len: usize) -> Result<Enumeration> {
    let vocab = &model.vocab;
    let branching = vocab.output_size() as f64;
    if max_len == 0 {
        return Err(Error::Contract("max_len must be positive".into()));
    }
    if branching.powi(max_len as i32) > ENUMERATION_LIMIT {
        return Err(Error::Capacity(format!(
            "{} labels ^ max_len {max_len} exceeds {ENUMERATION_LIMIT}",
            vocab.output_size()
        )));
    }
    let mut sequences = Vec::new();
    let mut stack = vec![(vec![vocab.sos()], 0.0, model.initial_state())];
    while let Some((labels, log_prob, state)) = stack.pop() {
        let step = model.decode_step(enc, *labels.last().unwrap(), &state)?;
        for g in vocab.emittable() {
            let mut child = labels.clone();
            child.push(g);
            let lp = log_prob + step.log_probs[g];
            if g == vocab.eos() || child.len() - 1 == max_len {
                sequences.push(EnumeratedSequence {
                    terminated: g == vocab.eos(),
                    labels: child,
                    log_prob: lp,
                });
            } else {
                stack.push((child, lp, step.state.clone()));
            }
        }
    }
    sequences.sort_by(|a, b| a.labels.cmp(&b.labels));
    Ok(Enumeration { sequences, max_len })
}

/// One line of the N-best interchange format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NBestRecord {
    pub utterance: String,
    pub rank: usize,
    pub log_prob: f64,
    pub labels: String,
}

pub fn nbest_records(utterance: &str, list: &NBestList, vocab: &Vocabulary) -> Vec<NBestRecord> {
    list.hypotheses
        .iter()
        .enumerate()
        .map(|(rank, h)| NBestRecord {
            utterance: utterance.to_string(),
            rank: rank + 1,
            log_prob: h.log_prob,
            labels: vocab.render(&h.labels),
        })
        .collect()
}
