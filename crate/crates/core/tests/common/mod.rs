#![allow(dead_code)]

use mwer_core::model::{ModelConfig, ModelParams, Utterance, Vocabulary};
use mwer_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `<sos> <eos> <sp>` plus the given graphemes.
pub fn vocab(graphemes: &[&str]) -> Vocabulary {
    Vocabulary::with_graphemes(graphemes.iter().copied()).unwrap()
}

/// A model small enough for exhaustive enumeration and dense gradient checks.
pub fn tiny_config(feature_dim: usize) -> ModelConfig {
    ModelConfig {
        feature_dim,
        encoder_layers: 1,
        encoder_cell: 2,
        bidirectional: false,
        decoder_layers: 1,
        decoder_cell: 2,
        heads: 2,
        attention_dim: 2,
        context_dim: 2,
        embedding_dim: 2,
    }
}

pub fn tiny_model(vocab: Vocabulary, scale: f64, seed: u64) -> ModelParams {
    ModelParams::init(tiny_config(3), vocab, scale, seed).unwrap()
}

pub fn random_features(frames: usize, dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..frames * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![frames, dim], data).unwrap()
}

pub fn utterance(vocab: &Vocabulary, words: &[&str], frames: usize, dim: usize, seed: u64) -> Utterance {
    let labels = vocab.frame_words(words).unwrap();
    Utterance::new("u", random_features(frames, dim, seed), labels, vocab).unwrap()
}

/// Every coordinate of `params`, evaluated through `f` at perturbed values.
pub fn with_flat<F: FnMut(&ModelParams) -> f64>(params: &ModelParams, mut f: F) -> impl FnMut(&[f64]) -> f64 {
    let mut probe = params.clone();
    move |flat: &[f64]| {
        probe.set_flat(flat).unwrap();
        f(&probe)
    }
}
