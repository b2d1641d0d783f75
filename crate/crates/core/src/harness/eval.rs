use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::decoding::{beam_search, default_max_len, sample_sequences};
use crate::error::Result;
use crate::losses::hypothesis_errors;
use crate::metrics::{label_word_errors, to_words, wer_percent, WordErrorStats};
use crate::model::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub beam_size: usize,
    /// Model samples per utterance for the sampled expected-errors metric.
    pub samples: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            beam_size: 8,
            samples: 8,
            seed: 12345,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceResult {
    pub id: String,
    pub hypothesis: Vec<String>,
    pub reference: Vec<String>,
    pub stats: WordErrorStats,
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Corpus WER (percent) of the beam search top-1.
    pub wer: f64,
    pub stats: WordErrorStats,
    /// Mean over utterances of the sample-average word errors.
    pub sampled_expected_errors: f64,
    /// Mean over utterances of `sum_i P^(y_i) W_i` over the N-best list.
    pub nbest_expected_errors: f64,
    pub utterances: Vec<UtteranceResult>,
}

/// Decode every utterance with beam search and score it. Each utterance's
/// sampling seed depends only on `cfg.seed` and its position.
pub fn evaluate(params: &ModelParams, data: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    let vocab = &params.vocab;
    let mut stats = WordErrorStats::default();
    let mut sampled = 0.0;
    let mut nbest = 0.0;
    let mut utterances = Vec::with_capacity(data.len());
    for (i, utt) in data.utterances.iter().enumerate() {
        let enc = params.encode(&utt.features)?;
        let max_len = default_max_len(utt.frames());
        let list = beam_search(params, &enc, cfg.beam_size, max_len)?;
        let best = list.best();
        let s = label_word_errors(&best.labels, &utt.labels, vocab);
        stats = stats + s;

        let hyps: Vec<Vec<usize>> = list.hypotheses.iter().map(|h| h.labels.clone()).collect();
        let errors = hypothesis_errors(params, &hyps, &utt.labels);
        let top = list.hypotheses[0].log_prob;
        let weights: Vec<f64> = list.hypotheses.iter().map(|h| (h.log_prob - top).exp()).collect();
        let z: f64 = weights.iter().sum();
        nbest += weights.iter().zip(&errors).map(|(w, e)| w * e).sum::<f64>() / z;

        if cfg.samples > 0 {
            let seed = cfg.seed.wrapping_add(i as u64);
            let draws = sample_sequences(params, &enc, cfg.samples, max_len, seed)?;
            let labels: Vec<Vec<usize>> = draws.into_iter().map(|h| h.labels).collect();
            let w = hypothesis_errors(params, &labels, &utt.labels);
            sampled += w.iter().sum::<f64>() / w.len() as f64;
        }

        utterances.push(UtteranceResult {
            id: utt.id.clone(),
            hypothesis: to_words(&best.labels, vocab),
            reference: to_words(&utt.labels, vocab),
            stats: s,
            log_prob: best.log_prob,
        });
    }
    let n = data.len().max(1) as f64;
    Ok(EvalReport {
        wer: wer_percent(&stats)?,
        stats,
        sampled_expected_errors: sampled / n,
        nbest_expected_errors: nbest / n,
        utterances,
    })
}
