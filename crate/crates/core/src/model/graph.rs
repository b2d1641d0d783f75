//! The encoder/attention/decoder network expressed as tape operations.

use super::params::{LstmIndex, ModelParams};
use super::vocab::check_framed;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Per-utterance attention memory: encoder frames projected once by every
/// head's `V` (keys) and `Z` (values).
#[derive(Debug, Clone, Copy)]
pub struct Memory {
    pub frames: usize,
    /// `[T x enc]`
    pub encoded: Var,
    /// `[T x M*a]`
    pub keys: Var,
    /// `[T x M x c]`
    pub values: Var,
}

/// Recurrent state of the decoder stack, one `[1 x cell]` pair per layer.
#[derive(Debug, Clone)]
pub struct GraphState {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
}

#[derive(Debug, Clone, Copy)]
struct StackedHeads {
    /// `[dec x M*a]`
    w: Var,
    /// `[enc x M*a]`
    v: Var,
    /// `[enc x M*c]`
    z: Var,
    /// `[1 x M*a]`
    u: Var,
}

/// Model parameters registered on a tape.
pub struct Net<'p> {
    pub params: &'p ModelParams,
    vars: Vec<Var>,
    heads: StackedHeads,
    sos_mask: Var,
}

impl<'p> Net<'p> {
    /// Register every parameter as a borrowed leaf. With `trainable` false
    /// the graph records no gradient paths.
    pub fn register(tape: &mut Tape<'p>, params: &'p ModelParams, trainable: bool) -> Result<Self> {
        let vars: Vec<Var> = params
            .tensors
            .iter()
            .map(|t| tape.borrow_as(t, trainable))
            .collect();
        let cfg = &params.config;
        let mut ws = Vec::with_capacity(cfg.heads);
        let mut vs = Vec::with_capacity(cfg.heads);
        let mut zs = Vec::with_capacity(cfg.heads);
        let mut us = Vec::with_capacity(cfg.heads);
        for h in &params.layout.heads {
            ws.push(tape.transpose(vars[h.w])?);
            vs.push(tape.transpose(vars[h.v])?);
            zs.push(tape.transpose(vars[h.z])?);
            us.push(tape.reshape(vars[h.u], vec![1, cfg.attention_dim])?);
        }
        let heads = StackedHeads {
            w: tape.concat(&ws, 1)?,
            v: tape.concat(&vs, 1)?,
            z: tape.concat(&zs, 1)?,
            u: tape.concat(&us, 1)?,
        };
        let mut mask = vec![0.0; params.vocab.len()];
        mask[params.vocab.sos()] = f64::NEG_INFINITY;
        let sos_mask = tape.constant(vec![1, mask.len()], mask)?;
        Ok(Self {
            params,
            vars,
            heads,
            sos_mask,
        })
    }

    pub fn var(&self, index: usize) -> Var {
        self.vars[index]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn lstm_gates(
        &self,
        tape: &mut Tape<'p>,
        pre: Var,
        c_prev: Var,
        cell: usize,
    ) -> Result<(Var, Var)> {
        let i = tape.slice(pre, 1, 0, cell)?;
        let f = tape.slice(pre, 1, cell, cell)?;
        let g = tape.slice(pre, 1, 2 * cell, cell)?;
        let o = tape.slice(pre, 1, 3 * cell, cell)?;
        let (i, f, g, o) = (tape.sigmoid(i), tape.sigmoid(f), tape.tanh(g), tape.sigmoid(o));
        let keep = tape.mul(f, c_prev)?;
        let write = tape.mul(i, g)?;
        let c = tape.add(keep, write)?;
        let squashed = tape.tanh(c);
        let h = tape.mul(o, squashed)?;
        Ok((h, c))
    }

    fn lstm_sequence(
        &self,
        tape: &mut Tape<'p>,
        idx: LstmIndex,
        inputs: Var,
        cell: usize,
        reverse: bool,
    ) -> Result<Var> {
        let frames = tape.shape(inputs)[0];
        let proj = tape.matmul(inputs, self.vars[idx.w_x])?;
        let proj = tape.add(proj, self.vars[idx.b])?;
        let mut h = tape.constant(vec![1, cell], vec![0.0; cell])?;
        let mut c = h;
        let mut outputs = vec![h; frames];
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..frames).rev())
        } else {
            Box::new(0..frames)
        };
        for t in order {
            let x_t = tape.slice(proj, 0, t, 1)?;
            let rec = tape.matmul(h, self.vars[idx.w_h])?;
            let pre = tape.add(x_t, rec)?;
            (h, c) = self.lstm_gates(tape, pre, c, cell)?;
            outputs[t] = h;
        }
        Ok(tape.concat(&outputs, 0)?)
    }

    /// Encoder stack over `features` `[T x d]`, giving `[T x enc]`.
    pub fn encode(&self, tape: &mut Tape<'p>, features: Var) -> Result<Var> {
        let cfg = &self.params.config;
        let shape = tape.shape(features);
        if shape.len() != 2 || shape[1] != cfg.feature_dim {
            return Err(Error::Config(format!(
                "features of shape {shape:?} do not match feature_dim {}",
                cfg.feature_dim
            )));
        }
        let mut x = features;
        for layer in &self.params.layout.encoder {
            let mut outs = Vec::with_capacity(layer.len());
            for (d, &idx) in layer.iter().enumerate() {
                outs.push(self.lstm_sequence(tape, idx, x, cfg.encoder_cell, d == 1)?);
            }
            x = tape.concat(&outs, 1)?;
        }
        Ok(x)
    }

    pub fn memory(&self, tape: &mut Tape<'p>, encoded: Var) -> Result<Memory> {
        let cfg = &self.params.config;
        let frames = tape.shape(encoded)[0];
        let keys = tape.matmul(encoded, self.heads.v)?;
        let values = tape.matmul(encoded, self.heads.z)?;
        let values = tape.reshape(values, vec![frames, cfg.heads, cfg.context_dim])?;
        Ok(Memory {
            frames,
            encoded,
            keys,
            values,
        })
    }

    /// Multi-head additive attention. Returns the concatenated context
    /// `[1 x M*c]` and the weights `[T x M]` (column `i` is head `i`).
    pub fn attend(&self, tape: &mut Tape<'p>, mem: &Memory, h_att: Var) -> Result<(Var, Var)> {
        let cfg = &self.params.config;
        let query = tape.matmul(h_att, self.heads.w)?;
        let hidden = tape.add(mem.keys, query)?;
        let hidden = tape.tanh(hidden);
        let scored = tape.mul(hidden, self.heads.u)?;
        let scored = tape.reshape(scored, vec![mem.frames, cfg.heads, cfg.attention_dim])?;
        let energies = tape.sum_axis(scored, 2)?;
        let energies = tape.reshape(energies, vec![mem.frames, cfg.heads])?;
        let alpha = tape.softmax(energies, 0)?;
        let weights = tape.reshape(alpha, vec![mem.frames, cfg.heads, 1])?;
        let weighted = tape.mul(mem.values, weights)?;
        let context = tape.sum_axis(weighted, 0)?;
        let context = tape.reshape(context, vec![1, cfg.context_total()])?;
        Ok((context, alpha))
    }

    pub fn initial_state(&self, tape: &mut Tape<'p>) -> Result<GraphState> {
        let cell = self.params.config.decoder_cell;
        let layers = self.params.config.decoder_layers;
        let zero = tape.constant(vec![1, cell], vec![0.0; cell])?;
        Ok(GraphState {
            h: vec![zero; layers],
            c: vec![zero; layers],
        })
    }

    /// One decoder step: attend with the pre-update top-layer state, feed
    /// `[embed(prev); context]` through the stack, project to logits.
    /// Logits are `[1 x |G|]` with `<sos>` masked to `-inf`.
    pub fn step(
        &self,
        tape: &mut Tape<'p>,
        mem: &Memory,
        prev_label: usize,
        state: &GraphState,
    ) -> Result<(Var, GraphState)> {
        let vocab = &self.params.vocab;
        if prev_label >= vocab.len() {
            return Err(Error::Contract(format!(
                "label {prev_label} outside vocabulary of size {}",
                vocab.len()
            )));
        }
        let layout = &self.params.layout;
        let cell = self.params.config.decoder_cell;
        let top = state.h.len() - 1;
        let (context, _) = self.attend(tape, mem, state.h[top])?;
        let embedded = tape.slice(self.vars[layout.embedding], 0, prev_label, 1)?;
        let mut x = tape.concat(&[embedded, context], 1)?;
        let mut next = GraphState {
            h: Vec::with_capacity(state.h.len()),
            c: Vec::with_capacity(state.c.len()),
        };
        for (l, idx) in layout.decoder.iter().enumerate() {
            let a = tape.matmul(x, self.vars[idx.w_x])?;
            let b = tape.matmul(state.h[l], self.vars[idx.w_h])?;
            let pre = tape.add_n(&[a, b])?;
            let pre = tape.add(pre, self.vars[idx.b])?;
            let (h, c) = self.lstm_gates(tape, pre, state.c[l], cell)?;
            next.h.push(h);
            next.c.push(c);
            x = h;
        }
        let logits = tape.matmul(x, self.vars[layout.out_w])?;
        let logits = tape.add(logits, self.vars[layout.out_b])?;
        let logits = tape.add(logits, self.sos_mask)?;
        Ok((logits, next))
    }

    /// Per-step `log P(y_u | y_<u, x)` for `u = 1..labels.len()`, each a `[1]` var.
    pub fn step_logprobs(&self, tape: &mut Tape<'p>, mem: &Memory, labels: &[usize]) -> Result<Vec<Var>> {
        let vocab = &self.params.vocab;
        if labels.first() != Some(&vocab.sos()) {
            return Err(Error::Contract("label sequence must start with <sos>".into()));
        }
        let mut state = self.initial_state(tape)?;
        let mut out = Vec::with_capacity(labels.len() - 1);
        for pair in labels.windows(2) {
            if pair[1] >= vocab.len() {
                return Err(Error::Contract(format!("label {} outside vocabulary", pair[1])));
            }
            let (logits, next) = self.step(tape, mem, pair[0], &state)?;
            let logp = tape.log_softmax(logits, 1)?;
            out.push(tape.pick(logp, pair[1])?);
            state = next;
        }
        Ok(out)
    }

    /// `log P(y | x)` of a hypothesis. `labels` starts with `<sos>`; it either
    /// ends at its first `<eos>` or is a truncated prefix.
    pub fn hypothesis_logprob(&self, tape: &mut Tape<'p>, mem: &Memory, labels: &[usize]) -> Result<Var> {
        let steps = self.step_logprobs(tape, mem, labels)?;
        if steps.is_empty() {
            return Err(Error::Contract("hypothesis has no emitted labels".into()));
        }
        Ok(tape.add_n(&steps)?)
    }

    /// `log P(y | x)` of a framed `<sos> ... <eos>` sequence.
    pub fn sequence_logprob(&self, tape: &mut Tape<'p>, mem: &Memory, labels: &[usize]) -> Result<Var> {
        check_framed(&self.params.vocab, labels)?;
        self.hypothesis_logprob(tape, mem, labels)
    }

    /// Encode a feature tensor and build its attention memory in one go.
    pub fn prepare(&self, tape: &mut Tape<'p>, features: &'p Tensor) -> Result<Memory> {
        let x = tape.borrow_as(features, false);
        let enc = self.encode(tape, x)?;
        self.memory(tape, enc)
    }
}
