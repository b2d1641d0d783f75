//! Training criteria: cross-entropy, expected word errors (exact, by
//! sampling, over an N-best list) and their CE-interpolated combinations.

use serde::{Deserialize, Serialize};

use crate::decoding::{self, default_max_len, Hypothesis};
use crate::error::{Error, Result};
use crate::metrics::label_word_errors;
use crate::model::{EncodedFeatures, Memory, ModelParams, Net, Utterance};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Ce,
    MwerSample,
    MwerNbest,
}

impl std::str::FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "ce" => Ok(Self::Ce),
            "mwer_sample" | "sample" => Ok(Self::MwerSample),
            "mwer_nbest" | "nbest" => Ok(Self::MwerNbest),
            other => Err(Error::Config(format!("unknown loss variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub variant: LossVariant,
    /// Sample count or N-best depth. Ignored by CE.
    pub n: usize,
    /// Weight of the CE term added to the word-error term.
    pub lambda: f64,
    /// Hypothesis length bound; `None` uses `2T + 10` per utterance.
    pub max_len: Option<usize>,
}

impl LossConfig {
    pub fn ce() -> Self {
        Self {
            variant: LossVariant::Ce,
            n: 1,
            lambda: 0.0,
            max_len: None,
        }
    }

    pub fn nbest(n: usize, lambda: f64) -> Self {
        Self {
            variant: LossVariant::MwerNbest,
            n,
            lambda,
            max_len: None,
        }
    }

    pub fn sample(n: usize, lambda: f64) -> Self {
        Self {
            variant: LossVariant::MwerSample,
            n,
            lambda,
            max_len: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.variant != LossVariant::Ce && self.n == 0 {
            return Err(Error::Config("MWER losses need n >= 1".into()));
        }
        if self.max_len == Some(0) {
            return Err(Error::Config("max_len must be positive".into()));
        }
        Ok(())
    }

    pub fn max_len_for(&self, frames: usize) -> usize {
        self.max_len.unwrap_or_else(|| default_max_len(frames))
    }
}

/// Loss value and its decomposition for one utterance (or a batch mean).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total_loss: f64,
    pub werr_term: f64,
    pub ce_term: f64,
    pub baseline_w_hat: f64,
    pub hypotheses_used: usize,
    pub expected_word_errors_estimate: f64,
}

impl LossReport {
    /// Absolute mismatch of `total == werr + lambda * ce`.
    pub fn decomposition_error(&self, lambda: f64, variant: LossVariant) -> f64 {
        let expected = match variant {
            LossVariant::Ce => self.ce_term,
            _ => self.werr_term + lambda * self.ce_term,
        };
        (self.total_loss - expected).abs()
    }
}

/// Per-parameter gradient buffers, aligned with [`ModelParams::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            tensors: params.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    fn from_tape(tape: &Tape<'_>, net: &Net<'_>) -> Self {
        Self {
            tensors: net
                .params
                .tensors
                .iter()
                .zip(net.vars())
                .map(|(t, &v)| tape.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flatten().copied().collect()
    }

    pub fn add_scaled(&mut self, other: &Self, factor: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += factor * y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.tensors.iter_mut().flatten().for_each(|x| *x *= factor);
    }

    pub fn norm(&self) -> f64 {
        self.tensors.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|x| x.is_finite())
    }
}

/// Produces the hypotheses an MWER loss averages over. Implementations only
/// receive encoder output, so reference labels cannot leak into decoding.
pub trait HypothesisSource {
    fn hypotheses(
        &mut self,
        model: &ModelParams,
        enc: &EncodedFeatures,
        cfg: &LossConfig,
        max_len: usize,
    ) -> Result<Vec<Hypothesis>>;
}

/// Beam search N-best lists.
#[derive(Debug, Clone, Copy, Default)]
pub struct BeamHypotheses;

impl HypothesisSource for BeamHypotheses {
    fn hypotheses(
        &mut self,
        model: &ModelParams,
        enc: &EncodedFeatures,
        cfg: &LossConfig,
        max_len: usize,
    ) -> Result<Vec<Hypothesis>> {
        Ok(decoding::beam_search(model, enc, cfg.n, max_len)?.hypotheses)
    }
}

/// Ancestral samples from a seeded generator.
#[derive(Debug, Clone, Copy)]
pub struct SampledHypotheses {
    pub seed: u64,
}

impl HypothesisSource for SampledHypotheses {
    fn hypotheses(
        &mut self,
        model: &ModelParams,
        enc: &EncodedFeatures,
        cfg: &LossConfig,
        max_len: usize,
    ) -> Result<Vec<Hypothesis>> {
        decoding::sample_sequences(model, enc, cfg.n, max_len, self.seed)
    }
}

/// `sum_u -log P(y*_u | y*_<u, x)` under teacher forcing.
pub fn ce_graph<'p>(tape: &mut Tape<'p>, net: &Net<'p>, mem: &Memory, labels: &[usize]) -> Result<Var> {
    let lp = net.sequence_logprob(tape, mem, labels)?;
    Ok(tape.scale(lp, -1.0))
}

/// Word errors of each hypothesis against `reference`.
pub fn hypothesis_errors(model: &ModelParams, hyps: &[Vec<usize>], reference: &[usize]) -> Vec<f64> {
    hyps.iter()
        .map(|h| label_word_errors(h, reference, &model.vocab).total() as f64)
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn hypothesis_logprobs<'p>(
    tape: &mut Tape<'p>,
    net: &Net<'p>,
    mem: &Memory,
    hyps: &[Vec<usize>],
) -> Result<Var> {
    let lps = hyps
        .iter()
        .map(|h| net.hypothesis_logprob(tape, mem, h))
        .collect::<Result<Vec<_>>>()?;
    Ok(tape.concat(&lps, 0)?)
}

/// Value of the N-best criterion built on a tape.
#[derive(Debug, Clone, Copy)]
pub struct NBestTerm {
    /// `sum_i P^(y_i) (W_i - W^)`, or without `W^` when disabled.
    pub loss: Var,
    pub w_hat: f64,
    /// `sum_i P^(y_i) W_i`
    pub expected: f64,
}

/// N-best criterion over a fixed hypothesis list: probabilities renormalized
/// over the list in the log domain, errors offset by their unweighted mean
/// when `subtract_baseline` is set. The list itself carries no gradient.
pub fn nbest_graph<'p>(
    tape: &mut Tape<'p>,
    net: &Net<'p>,
    mem: &Memory,
    hyps: &[Vec<usize>],
    errors: &[f64],
    subtract_baseline: bool,
) -> Result<NBestTerm> {
    if hyps.is_empty() || hyps.len() != errors.len() {
        return Err(Error::Contract("N-best list must be nonempty and match its error counts".into()));
    }
    let lps = hypothesis_logprobs(tape, net, mem, hyps)?;
    nbest_term(tape, lps, errors, subtract_baseline)
}

/// The N-best criterion given the list's `log P(y_i | x)` as a vector.
pub fn nbest_term(tape: &mut Tape<'_>, log_probs: Var, errors: &[f64], subtract_baseline: bool) -> Result<NBestTerm> {
    if errors.is_empty() || tape.shape(log_probs) != [errors.len()] {
        return Err(Error::Contract("log-probabilities and error counts must be equal-length vectors".into()));
    }
    let log_post = tape.log_softmax(log_probs, 0)?;
    let post = tape.exp(log_post);
    let w_hat = mean(errors);
    let offset = if subtract_baseline { w_hat } else { 0.0 };
    let weights = tape.constant(vec![errors.len()], errors.iter().map(|w| w - offset).collect())?;
    let weighted = tape.mul(post, weights)?;
    let loss = tape.sum(weighted);
    let expected = tape
        .value(post)
        .iter()
        .zip(errors)
        .map(|(p, w)| p * w)
        .sum();
    Ok(NBestTerm { loss, w_hat, expected })
}

/// Score-function surrogate `(1/N) sum_i stop_grad(W_i - W^) log P(y_i | x)`.
/// Its gradient is the sampled estimate of the expected-error gradient.
pub fn sample_surrogate_graph<'p>(
    tape: &mut Tape<'p>,
    net: &Net<'p>,
    mem: &Memory,
    samples: &[Vec<usize>],
    errors: &[f64],
    subtract_baseline: bool,
) -> Result<Var> {
    if samples.is_empty() || samples.len() != errors.len() {
        return Err(Error::Contract("sample set must be nonempty and match its error counts".into()));
    }
    let lps = hypothesis_logprobs(tape, net, mem, samples)?;
    let n = errors.len() as f64;
    let offset = if subtract_baseline { mean(errors) } else { 0.0 };
    let weights = tape.constant(
        vec![errors.len()],
        errors.iter().map(|w| (w - offset) / n).collect(),
    )?;
    let weighted = tape.mul(lps, weights)?;
    Ok(tape.sum(weighted))
}

fn encoded_from_tape(tape: &Tape<'_>, mem: &Memory) -> EncodedFeatures {
    let snap = |v: Var| -> Tensor {
        let mut t = tape.tensor(v);
        t.requires_grad = false;
        t.grad = None;
        t
    };
    EncodedFeatures::from_parts(snap(mem.encoded), snap(mem.keys), snap(mem.values))
}

/// Cross-entropy loss and its gradient.
pub fn ce_loss(params: &ModelParams, utt: &Utterance) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new();
    let net = Net::register(&mut tape, params, true)?;
    let mem = net.prepare(&mut tape, &utt.features)?;
    let ce = ce_graph(&mut tape, &net, &mem, &utt.labels)?;
    tape.backward(ce)?;
    Ok((tape.scalar_value(ce), Gradients::from_tape(&tape, &net)))
}

/// `sum_y P(y|x) W(y, y*)` over every hypothesis of length at most `max_len`
/// (terminated or cut off), by exhaustive enumeration.
pub fn expected_word_errors_exact(params: &ModelParams, utt: &Utterance, max_len: usize) -> Result<f64> {
    let enc = params.encode(&utt.features)?;
    let all = decoding::enumerate_all(params, &enc, max_len)?;
    Ok(all
        .sequences
        .iter()
        .map(|s| s.prob() * label_word_errors(&s.labels, &utt.labels, &params.vocab).total() as f64)
        .sum())
}

/// Exact expected word errors together with its exact gradient, obtained by
/// differentiating the enumerated sum `sum_y exp(log P(y|x)) W(y, y*)`.
pub fn expected_word_errors_exact_grad(
    params: &ModelParams,
    utt: &Utterance,
    max_len: usize,
) -> Result<(f64, Gradients)> {
    let enc = params.encode(&utt.features)?;
    let all = decoding::enumerate_all(params, &enc, max_len)?;
    let hyps: Vec<Vec<usize>> = all.sequences.iter().map(|s| s.labels.clone()).collect();
    let errors = hypothesis_errors(params, &hyps, &utt.labels);
    let mut tape = Tape::new();
    let net = Net::register(&mut tape, params, true)?;
    let mem = net.prepare(&mut tape, &utt.features)?;
    let lps = hypothesis_logprobs(&mut tape, &net, &mem, &hyps)?;
    let probs = tape.exp(lps);
    let w = tape.constant(vec![errors.len()], errors)?;
    let weighted = tape.mul(probs, w)?;
    let total = tape.sum(weighted);
    tape.backward(total)?;
    Ok((tape.scalar_value(total), Gradients::from_tape(&tape, &net)))
}

/// Evaluate the configured criterion on one utterance and differentiate it.
///
/// For the sampling variant the returned gradient is the score-function
/// estimate; the reported `werr_term` is the sample mean of `W`.
pub fn composite_loss_with<S: HypothesisSource + ?Sized>(
    params: &ModelParams,
    utt: &Utterance,
    cfg: &LossConfig,
    source: &mut S,
) -> Result<(LossReport, Gradients)> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let net = Net::register(&mut tape, params, true)?;
    let mem = net.prepare(&mut tape, &utt.features)?;
    let ce = ce_graph(&mut tape, &net, &mem, &utt.labels)?;
    let ce_value = tape.scalar_value(ce);

    let (objective, report) = match cfg.variant {
        LossVariant::Ce => (
            ce,
            LossReport {
                total_loss: ce_value,
                ce_term: ce_value,
                ..Default::default()
            },
        ),
        variant => {
            let enc = encoded_from_tape(&tape, &mem);
            let max_len = cfg.max_len_for(utt.frames());
            let hyps: Vec<Vec<usize>> = source
                .hypotheses(params, &enc, cfg, max_len)?
                .into_iter()
                .map(|h| h.labels)
                .collect();
            let errors = hypothesis_errors(params, &hyps, &utt.labels);
            let w_hat = mean(&errors);
            let (werr_var, werr_value, estimate) = if variant == LossVariant::MwerNbest {
                let term = nbest_graph(&mut tape, &net, &mem, &hyps, &errors, true)?;
                (term.loss, tape.scalar_value(term.loss), term.expected)
            } else {
                let s = sample_surrogate_graph(&mut tape, &net, &mem, &hyps, &errors, true)?;
                (s, w_hat, w_hat)
            };
            let scaled_ce = tape.scale(ce, cfg.lambda);
            let objective = tape.add(werr_var, scaled_ce)?;
            (
                objective,
                LossReport {
                    total_loss: werr_value + cfg.lambda * ce_value,
                    werr_term: werr_value,
                    ce_term: ce_value,
                    baseline_w_hat: w_hat,
                    hypotheses_used: hyps.len(),
                    expected_word_errors_estimate: estimate,
                },
            )
        }
    };
    tape.backward(objective)?;
    Ok((report, Gradients::from_tape(&tape, &net)))
}

/// [`composite_loss_with`] using beam search or seeded sampling as the
/// variant requires. The sampling variant needs `seed`.
pub fn composite_loss(
    params: &ModelParams,
    utt: &Utterance,
    cfg: &LossConfig,
    seed: Option<u64>,
) -> Result<(LossReport, Gradients)> {
    match cfg.variant {
        LossVariant::MwerSample => {
            let seed = seed.ok_or_else(|| Error::Contract("sampling loss requires an RNG seed".into()))?;
            composite_loss_with(params, utt, cfg, &mut SampledHypotheses { seed })
        }
        _ => composite_loss_with(params, utt, cfg, &mut BeamHypotheses),
    }
}

/// Sampling approximation without CE interpolation.
pub fn mwer_sample_loss(
    params: &ModelParams,
    utt: &Utterance,
    n: usize,
    max_len: Option<usize>,
    seed: u64,
) -> Result<(LossReport, Gradients)> {
    let cfg = LossConfig {
        max_len,
        ..LossConfig::sample(n, 0.0)
    };
    composite_loss(params, utt, &cfg, Some(seed))
}

/// N-best approximation without CE interpolation.
pub fn mwer_nbest_loss(
    params: &ModelParams,
    utt: &Utterance,
    n: usize,
    max_len: Option<usize>,
) -> Result<(LossReport, Gradients)> {
    let cfg = LossConfig {
        max_len,
        ..LossConfig::nbest(n, 0.0)
    };
    composite_loss(params, utt, &cfg, None)
}

/// N-best criterion value on a fixed hypothesis list (used to re-score the
/// same list under perturbed parameters).
pub fn nbest_loss_fixed(
    params: &ModelParams,
    utt: &Utterance,
    hyps: &[Vec<usize>],
    subtract_baseline: bool,
) -> Result<(f64, Gradients)> {
    let errors = hypothesis_errors(params, hyps, &utt.labels);
    let mut tape = Tape::new();
    let net = Net::register(&mut tape, params, true)?;
    let mem = net.prepare(&mut tape, &utt.features)?;
    let term = nbest_graph(&mut tape, &net, &mem, hyps, &errors, subtract_baseline)?;
    tape.backward(term.loss)?;
    Ok((tape.scalar_value(term.loss), Gradients::from_tape(&tape, &net)))
}

/// Score-function gradient estimate on a fixed sample set.
pub fn sample_gradient_fixed(
    params: &ModelParams,
    utt: &Utterance,
    samples: &[Vec<usize>],
    subtract_baseline: bool,
) -> Result<Gradients> {
    let errors = hypothesis_errors(params, samples, &utt.labels);
    let mut tape = Tape::new();
    let net = Net::register(&mut tape, params, true)?;
    let mem = net.prepare(&mut tape, &utt.features)?;
    let s = sample_surrogate_graph(&mut tape, &net, &mem, samples, &errors, subtract_baseline)?;
    tape.backward(s)?;
    Ok(Gradients::from_tape(&tape, &net))
}
