//! Attention-based encoder/decoder.
//!
//! [`graph::Net`] builds the network on a [`Tape`] and is what training
//! differentiates through. The methods on [`ModelParams`] below are the
//! gradient-free entry points used by decoding; each runs the same graph code
//! on a short-lived tape, so both paths produce bit-identical numbers.

pub mod checkpoint;
pub mod graph;
pub mod params;
pub mod vocab;

pub use graph::{GraphState, Memory, Net};
pub use params::{AttentionHeadParams, ModelConfig, ModelParams};
pub use vocab::{Utterance, Vocabulary};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Encoder output plus its per-head key/value projections.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedFeatures {
    /// `[T x enc]`
    pub encoded: Tensor,
    keys: Tensor,
    values: Tensor,
}

impl EncodedFeatures {
    pub(crate) fn from_parts(encoded: Tensor, keys: Tensor, values: Tensor) -> Self {
        Self {
            encoded,
            keys,
            values,
        }
    }

    pub fn frames(&self) -> usize {
        self.encoded.shape()[0]
    }

    fn memory<'a>(&'a self, tape: &mut Tape<'a>) -> Memory {
        Memory {
            frames: self.frames(),
            encoded: tape.borrow_as(&self.encoded, false),
            keys: tape.borrow_as(&self.keys, false),
            values: tape.borrow_as(&self.values, false),
        }
    }
}

/// Decoder recurrent state with concrete values.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub h: Vec<Tensor>,
    pub c: Vec<Tensor>,
}

impl DecoderState {
    fn on_tape<'a>(&'a self, tape: &mut Tape<'a>) -> GraphState {
        GraphState {
            h: self.h.iter().map(|t| tape.borrow_as(t, false)).collect(),
            c: self.c.iter().map(|t| tape.borrow_as(t, false)).collect(),
        }
    }

    fn from_tape(tape: &Tape<'_>, state: &GraphState) -> Self {
        let snap = |v: &crate::tensor::Var| {
            let mut t = tape.tensor(*v);
            t.requires_grad = false;
            t.grad = None;
            t
        };
        Self {
            h: state.h.iter().map(snap).collect(),
            c: state.c.iter().map(snap).collect(),
        }
    }
}

/// Output of one decoder step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// `|G|` logits; `<sos>` is `-inf`.
    pub logits: Vec<f64>,
    /// Normalized log-probabilities over the same labels.
    pub log_probs: Vec<f64>,
    pub state: DecoderState,
}

impl ModelParams {
    /// Run the encoder over `features` (`[T x d]`).
    pub fn encode(&self, features: &Tensor) -> Result<EncodedFeatures> {
        if features.shape().len() != 2 || features.shape()[0] == 0 {
            return Err(Error::Config(format!(
                "features must be a nonempty [T x d] matrix, got {:?}",
                features.shape()
            )));
        }
        let mut tape = Tape::new();
        let net = Net::register(&mut tape, self, false)?;
        let mem = net.prepare(&mut tape, features)?;
        let plain = |v| {
            let mut t: Tensor = tape.tensor(v);
            t.requires_grad = false;
            t
        };
        Ok(EncodedFeatures {
            encoded: plain(mem.encoded),
            keys: plain(mem.keys),
            values: plain(mem.values),
        })
    }

    /// Attention context `[M*c]` and per-head weights `[M][T]` for decoder
    /// state `h_att`.
    pub fn attend(&self, enc: &EncodedFeatures, h_att: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let cell = self.config.decoder_cell;
        if h_att.len() != cell {
            return Err(Error::Config(format!(
                "decoder state has {} entries, expected {cell}",
                h_att.len()
            )));
        }
        let mut tape = Tape::new();
        let net = Net::register(&mut tape, self, false)?;
        let mem = enc.memory(&mut tape);
        let h = tape.constant(vec![1, cell], h_att.to_vec())?;
        let (ctx, alpha) = net.attend(&mut tape, &mem, h)?;
        let heads = self.config.heads;
        let a = tape.value(alpha);
        let weights = (0..heads)
            .map(|i| (0..mem.frames).map(|t| a[t * heads + i]).collect())
            .collect();
        Ok((tape.value(ctx).to_vec(), weights))
    }

    pub fn initial_state(&self) -> DecoderState {
        let zero = Tensor::zeros(vec![1, self.config.decoder_cell]);
        DecoderState {
            h: vec![zero.clone(); self.config.decoder_layers],
            c: vec![zero; self.config.decoder_layers],
        }
    }

    pub fn decode_step(
        &self,
        enc: &EncodedFeatures,
        prev_label: usize,
        state: &DecoderState,
    ) -> Result<StepOutput> {
        let mut tape = Tape::new();
        let net = Net::register(&mut tape, self, false)?;
        let mem = enc.memory(&mut tape);
        let gs = state.on_tape(&mut tape);
        let (logits, next) = net.step(&mut tape, &mem, prev_label, &gs)?;
        let logp = tape.log_softmax(logits, 1)?;
        Ok(StepOutput {
            logits: tape.value(logits).to_vec(),
            log_probs: tape.value(logp).to_vec(),
            state: DecoderState::from_tape(&tape, &next),
        })
    }

    /// Teacher-forced `log P(y*_u | y*_<u, x)` for `u = 1..=L+1`.
    pub fn teacher_forced_logprobs(&self, utt: &Utterance) -> Result<Vec<f64>> {
        vocab::check_framed(&self.vocab, &utt.labels)?;
        let mut tape = Tape::new();
        let net = Net::register(&mut tape, self, false)?;
        let mem = net.prepare(&mut tape, &utt.features)?;
        let steps = net.step_logprobs(&mut tape, &mem, &utt.labels)?;
        Ok(steps.iter().map(|&v| tape.scalar_value(v)).collect())
    }

    /// `log P(y | x)` for a framed sequence.
    pub fn sequence_logprob(&self, features: &Tensor, labels: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let net = Net::register(&mut tape, self, false)?;
        let mem = net.prepare(&mut tape, features)?;
        let lp = net.sequence_logprob(&mut tape, &mem, labels)?;
        Ok(tape.scalar_value(lp))
    }

    /// `log P(y | x)` for a hypothesis that may be a truncated prefix.
    pub fn hypothesis_logprob(&self, enc: &EncodedFeatures, labels: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let net = Net::register(&mut tape, self, false)?;
        let mem = enc.memory(&mut tape);
        let lp = net.hypothesis_logprob(&mut tape, &mem, labels)?;
        Ok(tape.scalar_value(lp))
    }
}
