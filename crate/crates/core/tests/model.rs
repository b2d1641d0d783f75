mod common;

use common::*;
use mwer_core::decoding::enumerate_all;
use mwer_core::model::{ModelConfig, ModelParams};
use mwer_core::tensor::Tensor;

fn default_params(bidirectional: bool) -> ModelParams {
    let cfg = ModelConfig {
        encoder_cell: 8,
        bidirectional,
        ..ModelConfig::default()
    };
    ModelParams::init(cfg, vocab(&["a", "b", "c"]), 0.05, 1).unwrap()
}

#[test]
fn encoder_output_shapes() {
    let x = random_features(5, 8, 0);
    assert_eq!(default_params(false).encode(&x).unwrap().encoded.shape(), &[5, 8]);
    assert_eq!(default_params(true).encode(&x).unwrap().encoded.shape(), &[5, 16]);
}

#[test]
fn encoder_rejects_wrong_feature_dim() {
    let x = random_features(5, 7, 0);
    assert!(default_params(false).encode(&x).is_err());
}

#[test]
fn zero_model_encodes_to_zero() {
    let p = ModelParams::zeros(ModelConfig::default(), vocab(&["a"])).unwrap();
    let enc = p.encode(&random_features(4, 8, 1)).unwrap();
    assert!(enc.encoded.data().iter().all(|&x| x == 0.0));
}

#[test]
fn single_frame_attention_is_trivial() {
    let p = ModelParams::init(ModelConfig::default(), vocab(&["a"]), 0.3, 2).unwrap();
    let enc = p.encode(&random_features(1, 8, 3)).unwrap();
    let h: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
    let (ctx, alpha) = p.attend(&enc, &h).unwrap();
    assert!(alpha.iter().all(|a| a == &vec![1.0]));
    let henc = enc.encoded.row(0);
    let c = p.config.context_dim;
    for head in 0..p.config.heads {
        let z = p.head(head).z;
        for r in 0..c {
            let expect: f64 = z.row(r).iter().zip(henc).map(|(a, b)| a * b).sum();
            assert!((ctx[head * c + r] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_scorer_gives_uniform_attention() {
    let mut p = ModelParams::init(ModelConfig::default(), vocab(&["a"]), 0.3, 2).unwrap();
    for h in p.layout.heads.clone() {
        p.tensors[h.u].data_mut().fill(0.0);
    }
    let enc = p.encode(&random_features(7, 8, 3)).unwrap();
    let (_, alpha) = p.attend(&enc, &[0.1; 32]).unwrap();
    for head in alpha {
        for w in head {
            assert!((w - 1.0 / 7.0).abs() < 1e-15);
        }
    }
}

#[test]
fn attention_matches_loop_oracle() {
    let p = ModelParams::init(ModelConfig::default(), vocab(&["a"]), 0.5, 9).unwrap();
    let frames = 6;
    let enc = p.encode(&random_features(frames, 8, 4)).unwrap();
    let h_att: Vec<f64> = (0..32).map(|i| ((i * 13 % 7) as f64 - 3.0) / 4.0).collect();
    let (ctx, alpha) = p.attend(&enc, &h_att).unwrap();
    let matvec = |m: &Tensor, v: &[f64]| -> Vec<f64> {
        (0..m.shape()[0]).map(|r| m.row(r).iter().zip(v).map(|(a, b)| a * b).sum()).collect()
    };
    let c = p.config.context_dim;
    let mut max_diff: f64 = 0.0;
    for i in 0..p.config.heads {
        let head = p.head(i);
        let wh = matvec(head.w, &h_att);
        let beta: Vec<f64> = (0..frames)
            .map(|t| {
                let vh = matvec(head.v, enc.encoded.row(t));
                (0..wh.len()).map(|k| head.u.data()[k] * (wh[k] + vh[k]).tanh()).sum()
            })
            .collect();
        let denom: f64 = beta.iter().map(|b| b.exp()).sum();
        let a: Vec<f64> = beta.iter().map(|b| b.exp() / denom).collect();
        let mut summary = vec![0.0; c];
        for t in 0..frames {
            let zh = matvec(head.z, enc.encoded.row(t));
            summary.iter_mut().zip(&zh).for_each(|(s, z)| *s += a[t] * z);
        }
        for t in 0..frames {
            max_diff = max_diff.max((a[t] - alpha[i][t]).abs());
        }
        for r in 0..c {
            max_diff = max_diff.max((summary[r] - ctx[i * c + r]).abs());
        }
        assert!((alpha[i].iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }
    assert!(max_diff < 1e-12, "{max_diff}");
    assert_eq!(ctx.len(), p.config.heads * c);
}

#[test]
fn context_size_independent_of_frames() {
    let p = default_params(false);
    for frames in [1, 3, 11] {
        let enc = p.encode(&random_features(frames, 8, frames as u64)).unwrap();
        let (ctx, _) = p.attend(&enc, &[0.0; 32]).unwrap();
        assert_eq!(ctx.len(), 64);
    }
}

#[test]
fn decode_step_normalized_and_deterministic() {
    let p = ModelParams::init(ModelConfig::default(), vocab(&["a", "b"]), 0.3, 5).unwrap();
    let enc = p.encode(&random_features(4, 8, 6)).unwrap();
    let s0 = p.initial_state();
    let a = p.decode_step(&enc, p.vocab.sos(), &s0).unwrap();
    let b = p.decode_step(&enc, p.vocab.sos(), &s0).unwrap();
    assert_eq!(a, b);
    let mass: f64 = a.log_probs.iter().map(|l| l.exp()).sum();
    assert!((mass - 1.0).abs() < 1e-12);
    assert_eq!(a.log_probs[p.vocab.sos()], f64::NEG_INFINITY);
    assert!(p.decode_step(&enc, 99, &s0).is_err());
}

#[test]
fn zero_model_is_uniform_over_emittable_labels() {
    // four emittable labels: <eos>, <sp>, a, b
    let p = ModelParams::zeros(ModelConfig::default(), vocab(&["a", "b"])).unwrap();
    let enc = p.encode(&random_features(3, 8, 1)).unwrap();
    let out = p.decode_step(&enc, p.vocab.sos(), &p.initial_state()).unwrap();
    for g in p.vocab.emittable() {
        assert!((out.log_probs[g].exp() - 0.25).abs() < 1e-15);
    }
    let utt = utterance(&p.vocab, &["a"], 3, 8, 2);
    // y* = <sos> a <eos>, but use a two-word target for L+1 = 3
    let utt3 = mwer_core::model::Utterance::new(
        "z",
        utt.features.clone(),
        p.vocab.encode(&["<sos>", "a", "b", "<eos>"]).unwrap(),
        &p.vocab,
    )
    .unwrap();
    let lps = p.teacher_forced_logprobs(&utt3).unwrap();
    assert_eq!(lps.len(), 3);
    for lp in &lps {
        assert!((lp + 4f64.ln()).abs() < 1e-12);
    }
    assert!((lps.iter().sum::<f64>() + 3.0 * 4f64.ln()).abs() < 1e-12);
}

#[test]
fn teacher_forcing_matches_step_replay_and_sequence_logprob() {
    let p = ModelParams::init(ModelConfig::default(), vocab(&["a", "b", "c"]), 0.4, 8).unwrap();
    let utt = utterance(&p.vocab, &["abc", "ca"], 9, 8, 3);
    let tf = p.teacher_forced_logprobs(&utt).unwrap();
    assert_eq!(tf.len(), utt.labels.len() - 1);
    assert!(tf.iter().all(|&l| l <= 0.0));
    let enc = p.encode(&utt.features).unwrap();
    let mut state = p.initial_state();
    for (u, pair) in utt.labels.windows(2).enumerate() {
        let out = p.decode_step(&enc, pair[0], &state).unwrap();
        assert!((out.log_probs[pair[1]] - tf[u]).abs() < 1e-12);
        state = out.state;
    }
    let seq = p.sequence_logprob(&utt.features, &utt.labels).unwrap();
    assert!((seq - tf.iter().sum::<f64>()).abs() < 1e-12);
    assert!(seq.exp() > 0.0 && seq.exp() <= 1.0);
    assert!(p.sequence_logprob(&utt.features, &utt.labels[1..]).is_err());
}

#[test]
fn enumerated_mass_is_one() {
    let v = vocab(&["a"]);
    for seed in 0..5 {
        let p = tiny_model(v.clone(), 1.0, seed);
        let enc = p.encode(&random_features(3, 3, seed)).unwrap();
        let all = enumerate_all(&p, &enc, 5).unwrap();
        let total = all.terminated_mass() + all.residual();
        assert!((total - 1.0).abs() < 1e-9, "{total}");
        for s in all.terminated() {
            let lp = p.sequence_logprob(&random_features(3, 3, seed), &s.labels).unwrap();
            assert!((lp - s.log_prob).abs() < 1e-10);
        }
    }
}
