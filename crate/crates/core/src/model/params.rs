use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Layer sizes of the encoder, attention and decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub encoder_layers: usize,
    pub encoder_cell: usize,
    pub bidirectional: bool,
    pub decoder_layers: usize,
    pub decoder_cell: usize,
    /// Number of attention heads `M`.
    pub heads: usize,
    /// Hidden size of the additive attention scorer.
    pub attention_dim: usize,
    /// Per-head context size; the decoder receives `heads * context_dim`.
    pub context_dim: usize,
    pub embedding_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 8,
            encoder_layers: 2,
            encoder_cell: 32,
            bidirectional: false,
            decoder_layers: 2,
            decoder_cell: 32,
            heads: 4,
            attention_dim: 16,
            context_dim: 16,
            embedding_dim: 16,
        }
    }
}

impl ModelConfig {
    /// Single-layer bidirectional model sized for the synthetic task.
    pub fn compact() -> Self {
        Self {
            encoder_layers: 1,
            encoder_cell: 16,
            bidirectional: true,
            decoder_layers: 1,
            decoder_cell: 16,
            heads: 2,
            attention_dim: 8,
            context_dim: 8,
            embedding_dim: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("feature_dim", self.feature_dim),
            ("encoder_layers", self.encoder_layers),
            ("encoder_cell", self.encoder_cell),
            ("decoder_layers", self.decoder_layers),
            ("decoder_cell", self.decoder_cell),
            ("heads", self.heads),
            ("attention_dim", self.attention_dim),
            ("context_dim", self.context_dim),
            ("embedding_dim", self.embedding_dim),
        ];
        match sizes.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(Error::Config(format!("{name} must be positive"))),
            None => Ok(()),
        }
    }

    pub fn directions(&self) -> usize {
        if self.bidirectional {
            2
        } else {
            1
        }
    }

    /// Width of each encoded frame.
    pub fn encoder_dim(&self) -> usize {
        self.encoder_cell * self.directions()
    }

    pub fn context_total(&self) -> usize {
        self.heads * self.context_dim
    }
}

/// Parameter indices of one LSTM layer: input weights `[in x 4c]`, recurrent
/// weights `[c x 4c]`, bias `[1 x 4c]`, gates ordered input, forget, cell, output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmIndex {
    pub w_x: usize,
    pub w_h: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadIndex {
    pub w: usize,
    pub v: usize,
    pub z: usize,
    pub u: usize,
}

/// Where each named parameter lives in [`ModelParams::tensors`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    /// `[layer][direction]`
    pub encoder: Vec<Vec<LstmIndex>>,
    pub heads: Vec<HeadIndex>,
    pub decoder: Vec<LstmIndex>,
    pub embedding: usize,
    pub out_w: usize,
    pub out_b: usize,
}

/// Borrowed view of one attention head.
#[derive(Debug, Clone, Copy)]
pub struct AttentionHeadParams<'a> {
    /// `[a x dec]`
    pub w: &'a Tensor,
    /// `[a x enc]`
    pub v: &'a Tensor,
    /// `[c x enc]`
    pub z: &'a Tensor,
    /// `[a]`
    pub u: &'a Tensor,
}

/// All trainable parameters, in a fixed order given by [`Layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
    pub layout: Layout,
}

fn shapes(config: &ModelConfig, vocab: &Vocabulary) -> (Vec<(String, Vec<usize>)>, Layout) {
    let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
    let mut add = |name: String, shape: Vec<usize>| {
        specs.push((name, shape));
        specs.len() - 1
    };
    let dirs = ["fwd", "bwd"];
    let mut encoder = Vec::new();
    for layer in 0..config.encoder_layers {
        let input = if layer == 0 {
            config.feature_dim
        } else {
            config.encoder_dim()
        };
        let c = config.encoder_cell;
        let per_dir = dirs[..config.directions()]
            .iter()
            .map(|d| LstmIndex {
                w_x: add(format!("encoder.l{layer}.{d}.w_x"), vec![input, 4 * c]),
                w_h: add(format!("encoder.l{layer}.{d}.w_h"), vec![c, 4 * c]),
                b: add(format!("encoder.l{layer}.{d}.b"), vec![1, 4 * c]),
            })
            .collect();
        encoder.push(per_dir);
    }
    let enc = config.encoder_dim();
    let heads = (0..config.heads)
        .map(|h| HeadIndex {
            w: add(
                format!("attention.h{h}.W"),
                vec![config.attention_dim, config.decoder_cell],
            ),
            v: add(format!("attention.h{h}.V"), vec![config.attention_dim, enc]),
            z: add(format!("attention.h{h}.Z"), vec![config.context_dim, enc]),
            u: add(format!("attention.h{h}.u"), vec![config.attention_dim]),
        })
        .collect();
    let mut decoder = Vec::new();
    for layer in 0..config.decoder_layers {
        let input = if layer == 0 {
            config.embedding_dim + config.context_total()
        } else {
            config.decoder_cell
        };
        let c = config.decoder_cell;
        decoder.push(LstmIndex {
            w_x: add(format!("decoder.l{layer}.w_x"), vec![input, 4 * c]),
            w_h: add(format!("decoder.l{layer}.w_h"), vec![c, 4 * c]),
            b: add(format!("decoder.l{layer}.b"), vec![1, 4 * c]),
        });
    }
    let embedding = add("embedding".into(), vec![vocab.len(), config.embedding_dim]);
    let out_w = add("output.w".into(), vec![config.decoder_cell, vocab.len()]);
    let out_b = add("output.b".into(), vec![1, vocab.len()]);
    let layout = Layout {
        encoder,
        heads,
        decoder,
        embedding,
        out_w,
        out_b,
    };
    (specs, layout)
}

impl ModelParams {
    /// All-zero parameters.
    pub fn zeros(config: ModelConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = shapes(&config, &vocab);
        let (names, tensors) = specs
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(s).with_grad()))
            .unzip();
        Ok(Self {
            config,
            vocab,
            names,
            tensors,
            layout,
        })
    }

    /// Uniform `[-scale, scale]` initialization with LSTM forget-gate biases
    /// set to 1.0.
    pub fn init(config: ModelConfig, vocab: Vocabulary, scale: f64, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(config, vocab)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in &mut params.tensors {
            t.data_mut()
                .iter_mut()
                .for_each(|x| *x = rng.random_range(-scale..=scale));
        }
        let lstms: Vec<LstmIndex> = params
            .layout
            .encoder
            .iter()
            .flatten()
            .chain(&params.layout.decoder)
            .copied()
            .collect();
        for idx in lstms {
            let b = &mut params.tensors[idx.b];
            let c = b.len() / 4;
            b.data_mut()[c..2 * c].iter_mut().for_each(|x| *x = 1.0);
        }
        Ok(params)
    }

    /// Rebuild from named tensors, checking names and shapes against the
    /// layout implied by `config` and `vocab`.
    pub fn from_named(
        config: ModelConfig,
        vocab: Vocabulary,
        named: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        let mut params = Self::zeros(config, vocab)?;
        if named.len() != params.tensors.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                params.tensors.len(),
                named.len()
            )));
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            if name != params.names[i] || t.shape() != params.tensors[i].shape() {
                return Err(Error::Format(format!(
                    "parameter {i}: expected {} {:?}, found {name} {:?}",
                    params.names[i],
                    params.tensors[i].shape(),
                    t.shape()
                )));
            }
            params.tensors[i] = t.with_grad();
        }
        Ok(params)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn head(&self, i: usize) -> AttentionHeadParams<'_> {
        let h = self.layout.heads[i];
        AttentionHeadParams {
            w: &self.tensors[h.w],
            v: &self.tensors[h.v],
            z: &self.tensors[h.z],
            u: &self.tensors[h.u],
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Flat copy of every parameter value, in layout order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_parameters() {
            return Err(Error::Contract(format!(
                "flat vector has {} entries, model has {}",
                flat.len(),
                self.num_parameters()
            )));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}
