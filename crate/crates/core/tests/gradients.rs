//! Analytic gradients against central finite differences.

mod common;

use common::*;
use mwer_core::gradcheck::{check, max_rel_error};
use mwer_core::losses::{ce_loss, nbest_loss_fixed};
use mwer_core::decoding::beam_search;
use mwer_core::model::{ModelConfig, ModelParams, Net};
use mwer_core::tensor::{Tape, Tensor};

const STEP: f64 = 1e-5;
// central differences at h = 1e-5 carry ~1e-10 absolute roundoff on O(1) losses
const FLOOR: f64 = 1e-5;

#[test]
fn ce_loss_gradient_matches_finite_differences() {
    let v = vocab(&["a", "b"]);
    let params = tiny_model(v.clone(), 0.5, 11);
    let utt = utterance(&v, &["ab", "a"], 4, 3, 5);
    let (_, grads) = ce_loss(&params, &utt).unwrap();
    let flat = params.flatten();
    let coords: Vec<usize> = (0..flat.len()).collect();
    let results = check(&flat, &grads.flatten(), &coords, STEP, FLOOR, with_flat(&params, |p| {
        ce_loss(p, &utt).unwrap().0
    }));
    let worst = max_rel_error(&results);
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn bidirectional_two_layer_ce_gradient() {
    let v = vocab(&["a"]);
    let cfg = ModelConfig {
        bidirectional: true,
        encoder_layers: 2,
        decoder_layers: 2,
        ..tiny_config(3)
    };
    let params = ModelParams::init(cfg, v.clone(), 0.4, 3).unwrap();
    assert!(params.num_parameters() < 500);
    let utt = utterance(&v, &["a", "aa"], 3, 3, 9);
    let (_, grads) = ce_loss(&params, &utt).unwrap();
    let flat = params.flatten();
    let coords: Vec<usize> = (0..flat.len()).collect();
    let results = check(&flat, &grads.flatten(), &coords, STEP, FLOOR, with_flat(&params, |p| {
        ce_loss(p, &utt).unwrap().0
    }));
    assert!(max_rel_error(&results) < 1e-4, "{}", max_rel_error(&results));
}

#[test]
fn nbest_gradient_on_fixed_list_matches_finite_differences() {
    let v = vocab(&["a", "b"]);
    let params = tiny_model(v.clone(), 0.8, 21);
    let utt = utterance(&v, &["ab"], 3, 3, 2);
    let enc = params.encode(&utt.features).unwrap();
    let list = beam_search(&params, &enc, 4, 5).unwrap();
    let hyps: Vec<Vec<usize>> = list.hypotheses.iter().map(|h| h.labels.clone()).collect();
    assert!(hyps.len() >= 2);
    let (_, grads) = nbest_loss_fixed(&params, &utt, &hyps, true).unwrap();
    let flat = params.flatten();
    let coords: Vec<usize> = (0..flat.len()).collect();
    let results = check(&flat, &grads.flatten(), &coords, STEP, FLOOR, with_flat(&params, |p| {
        nbest_loss_fixed(p, &utt, &hyps, true).unwrap().0
    }));
    assert!(max_rel_error(&results) < 1e-4, "{}", max_rel_error(&results));
}

/// Two stacked LSTM steps built by hand on the tape, with the weight matrix
/// consumed by both steps.
#[test]
fn recurrent_step_gradients_match_finite_differences() {
    let w_init: Vec<f64> = (0..16).map(|i| ((i * 7 % 11) as f64 - 5.0) / 10.0).collect();
    let x_init = vec![0.3, -0.2, 0.5, 0.1];
    let f = |w: &[f64], x: &[f64]| -> (f64, Vec<f64>, Vec<f64>) {
        let wt = Tensor::new(vec![4, 4], w.to_vec()).unwrap().with_grad();
        let xt = Tensor::new(vec![1, 4], x.to_vec()).unwrap().with_grad();
        let mut tape = Tape::new();
        let wv = tape.borrow(&wt);
        let xv = tape.borrow(&xt);
        let h1 = tape.matmul(xv, wv).unwrap();
        let h1 = tape.tanh(h1);
        let h2 = tape.matmul(h1, wv).unwrap();
        let h2 = tape.sigmoid(h2);
        let mixed = tape.mul(h2, h1).unwrap();
        let sm = tape.log_softmax(mixed, 1).unwrap();
        let e = tape.exp(sm);
        let both = tape.concat(&[e, h1], 1).unwrap();
        let loss = tape.sum(both);
        let val = tape.scalar_value(loss);
        tape.backward(loss).unwrap();
        (val, tape.grad(wv).unwrap().to_vec(), tape.grad(xv).unwrap().to_vec())
    };
    let (_, gw, gx) = f(&w_init, &x_init);
    let coords: Vec<usize> = (0..16).collect();
    let rw = check(&w_init, &gw, &coords, STEP, FLOOR, |w| f(w, &x_init).0);
    assert!(max_rel_error(&rw) < 1e-5, "{}", max_rel_error(&rw));
    let rx = check(&x_init, &gx, &[0, 1, 2, 3], STEP, FLOOR, |x| f(&w_init, x).0);
    assert!(max_rel_error(&rx) < 1e-5, "{}", max_rel_error(&rx));
}

#[test]
fn tanh_derivative_matches_central_difference() {
    let x0 = 0.3;
    let t = Tensor::scalar(x0).with_grad();
    let mut tape = Tape::new();
    let x = tape.borrow(&t);
    let y = tape.tanh(x);
    tape.backward(y).unwrap();
    let analytic = tape.grad(x).unwrap()[0];
    let numeric = ((x0 + STEP).tanh() - (x0 - STEP).tanh()) / (2.0 * STEP);
    assert!((analytic - numeric).abs() / numeric.abs() < 1e-6);
}

#[test]
fn sequence_logprob_gradient_per_parameter_group() {
    let v = vocab(&["a", "b"]);
    let params = tiny_model(v.clone(), 0.6, 4);
    let utt = utterance(&v, &["ba"], 3, 3, 8);
    let value = |p: &ModelParams| {
        let mut tape = Tape::new();
        let net = Net::register(&mut tape, p, true).unwrap();
        let mem = net.prepare(&mut tape, &utt.features).unwrap();
        let lp = net.sequence_logprob(&mut tape, &mem, &utt.labels).unwrap();
        tape.scalar_value(lp)
    };
    let mut tape = Tape::new();
    let net = Net::register(&mut tape, &params, true).unwrap();
    let mem = net.prepare(&mut tape, &utt.features).unwrap();
    let lp = net.sequence_logprob(&mut tape, &mem, &utt.labels).unwrap();
    tape.backward(lp).unwrap();
    let analytic: Vec<f64> = params
        .tensors
        .iter()
        .zip(net.vars())
        .flat_map(|(t, &v)| tape.grad(v).map_or(vec![0.0; t.len()], |g| g.to_vec()))
        .collect();
    let flat = params.flatten();
    let mut offset = 0;
    for (name, t) in params.names.iter().zip(&params.tensors) {
        let coords: Vec<usize> = (offset..offset + t.len()).collect();
        let r = check(&flat, &analytic, &coords, STEP, FLOOR, with_flat(&params, value));
        assert!(max_rel_error(&r) < 1e-4, "{name}: {}", max_rel_error(&r));
        offset += t.len();
    }
}
