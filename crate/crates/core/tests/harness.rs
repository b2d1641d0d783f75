mod common;

use std::fs;

use mwer_core::data::{generate, split, Dataset, TaskSpec};
use mwer_core::harness::{
    adam_step, run_experiment_suite, summary_table, train, train_from, write_bundle, write_outcome, AdamConfig,
    AdamState, ExperimentKind, RunFiles, Stage, TrainConfig, TrainStatus,
};
use mwer_core::losses::{Gradients, LossConfig, LossVariant};
use mwer_core::model::{checkpoint, ModelConfig, ModelParams};
use mwer_core::Error;

fn small_task(noise: f64, count: usize, seed: u64) -> (Dataset, Dataset) {
    let spec = TaskSpec {
        vocab_words: vec!["ab".into(), "ba".into(), "a".into()],
        words_per_utterance: [1, 2],
        frames_per_grapheme: [1, 2],
        feature_dim: 4,
        noise_std: noise,
        seed,
    };
    let (train, held, _) = split(&generate(&spec, count).unwrap(), [0.7, 0.2, 0.1], seed).unwrap();
    (train, held)
}

fn small_ce(steps: usize) -> TrainConfig {
    let mut cfg = TrainConfig::ce();
    cfg.model = ModelConfig {
        feature_dim: 4,
        ..common::tiny_config(4)
    };
    cfg.max_steps = steps;
    cfg.eval_every = 3;
    cfg.batch_size = 2;
    cfg.eval.beam_size = 2;
    cfg.eval.samples = 2;
    cfg
}

fn uniform_grads(params: &ModelParams, g: f64) -> Gradients {
    let mut grads = Gradients::zeros_like(params);
    grads.tensors.iter_mut().for_each(|t| t.iter_mut().for_each(|x| *x = g));
    grads
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let mut params = common::tiny_model(common::vocab(&["a"]), 0.5, 1);
    let before = params.clone();
    let mut state = AdamState::new(&params);
    let grads = Gradients::zeros_like(&params);
    adam_step(&mut params, &grads, &mut state, &AdamConfig::default()).unwrap();
    assert_eq!(params, before);
}

#[test]
fn adam_matches_scalar_reference() {
    let hyper = AdamConfig::default();
    let mut params = common::tiny_model(common::vocab(&["a"]), 0.5, 2);
    let start = params.flatten();
    let mut state = AdamState::new(&params);
    let history = [1.0, -0.5, 2.0];
    // hand-rolled scalar Adam
    let (mut m, mut v, mut delta) = (0.0f64, 0.0f64, 0.0f64);
    for (t, &g) in history.iter().enumerate() {
        let grads = uniform_grads(&params, g);
        adam_step(&mut params, &grads, &mut state, &hyper).unwrap();
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let k = t as i32 + 1;
        let m_hat = m / (1.0 - 0.9f64.powi(k));
        let v_hat = v / (1.0 - 0.999f64.powi(k));
        delta -= hyper.step_size * m_hat / (v_hat.sqrt() + hyper.epsilon);
        if t == 0 {
            assert!((delta + hyper.step_size).abs() < 1e-9);
        }
    }
    for (a, b) in params.flatten().iter().zip(&start) {
        assert!((a - b - delta).abs() < 1e-15);
    }
}

#[test]
fn adam_rejects_mismatched_shapes() {
    let mut params = common::tiny_model(common::vocab(&["a"]), 0.5, 3);
    let mut state = AdamState::new(&params);
    let mut grads = Gradients::zeros_like(&params);
    grads.tensors[0].pop();
    assert!(matches!(
        adam_step(&mut params, &grads, &mut state, &AdamConfig::default()),
        Err(Error::Contract(_))
    ));
}

#[test]
fn config_validation() {
    assert!(TrainConfig::ce().validate().is_ok());
    assert!(TrainConfig::mwer("x.ckpt").validate().is_ok());
    let no_ckpt = TrainConfig {
        init_checkpoint: None,
        ..TrainConfig::mwer("x.ckpt")
    };
    assert!(matches!(no_ckpt.validate(), Err(Error::Config(_))));
    let wrong_loss = TrainConfig {
        loss: LossConfig::nbest(4, 0.01),
        ..TrainConfig::ce()
    };
    assert!(wrong_loss.validate().is_err());
    let lr = TrainConfig::mwer("x").optimizer.step_size;
    assert!((TrainConfig::ce().optimizer.step_size / lr - 10.0).abs() < 1e-12);
}

#[test]
fn missing_checkpoint_reports_path() {
    let (tr, he) = small_task(0.1, 20, 0);
    let cfg = TrainConfig::mwer("/nonexistent/dir/model.ckpt");
    match train(&cfg, &tr, &he) {
        Err(e @ Error::Io { .. }) => assert!(e.to_string().contains("/nonexistent/dir/model.ckpt")),
        other => panic!("expected IO error, got {other:?}"),
    }
}

#[test]
fn zero_steps_returns_initialization() {
    let (tr, he) = small_task(0.1, 20, 1);
    let cfg = small_ce(0);
    let out = train(&cfg, &tr, &he).unwrap();
    let init = ModelParams::init(cfg.model.clone(), tr.vocab.clone(), cfg.init_scale, cfg.seed).unwrap();
    assert_eq!(checkpoint::to_bytes(&out.params), checkpoint::to_bytes(&init));
    assert_eq!(out.records.len(), 1);
    assert_eq!(out.status, TrainStatus::Completed);
}

#[test]
fn records_are_ordered_and_runs_reproducible() {
    let (tr, he) = small_task(0.2, 30, 2);
    let cfg = small_ce(7);
    let dir = tempfile::tempdir().unwrap();
    let a = write_outcome(&train(&cfg, &tr, &he).unwrap(), &dir.path().join("a")).unwrap();
    let b = write_outcome(&train(&cfg, &tr, &he).unwrap(), &dir.path().join("b")).unwrap();
    let read = |f: &RunFiles| (fs::read(&f.checkpoint).unwrap(), fs::read(&f.metrics).unwrap());
    assert_eq!(read(&a), read(&b));
    let records = mwer_core::harness::read_metrics(&a.metrics).unwrap();
    let steps: Vec<usize> = records.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 3, 6, 7]);
    assert!(records[1..].iter().all(|r| r.train.is_some()));
    // MWER stage from that checkpoint is also reproducible, for both variants
    for loss in [LossConfig::nbest(2, 0.01), LossConfig::sample(2, 0.01)] {
        let mut m = TrainConfig::mwer(&a.checkpoint);
        m.loss = loss;
        m.max_steps = 3;
        m.eval_every = 2;
        m.batch_size = 2;
        m.eval = cfg.eval;
        let x = train(&m, &tr, &he).unwrap();
        let y = train(&m, &tr, &he).unwrap();
        assert_eq!(x.records, y.records);
        assert_eq!(checkpoint::to_bytes(&x.params), checkpoint::to_bytes(&y.params));
        assert!(x.records.iter().all(|r| r.stage == Stage::Mwer));
    }
}

#[test]
fn non_finite_loss_aborts_with_diagnostic() {
    let (tr, he) = small_task(0.2, 20, 3);
    let cfg = small_ce(5);
    let mut params =
        ModelParams::init(ModelConfig { feature_dim: 4, ..cfg.model.clone() }, tr.vocab.clone(), 0.1, 0).unwrap();
    let i = params.index_of("output.b").unwrap();
    params.tensors[i].data_mut()[1] = f64::NAN;
    let out = train_from(params, &cfg, &tr, &he).unwrap();
    assert!(matches!(out.status, TrainStatus::NonFinite { step: 1, .. }));
    let last = out.records.last().unwrap();
    assert_eq!(last.step, 1);
    assert!(last.diagnostic.as_deref().unwrap().contains("non-finite"));
}

#[test]
fn experiment_summaries_have_expected_shape() {
    let (tr, he) = small_task(0.2, 16, 4);
    let dir = tempfile::tempdir().unwrap();
    let ce = train(&small_ce(2), &tr, &he).unwrap();
    let files = write_outcome(&ce, dir.path()).unwrap();
    let mut base = TrainConfig::mwer(&files.checkpoint);
    base.max_steps = 1;
    base.eval_every = 1;
    base.batch_size = 1;
    base.eval.beam_size = 2;
    base.eval.samples = 2;

    let fig2c = run_experiment_suite(ExperimentKind::Fig2cNbestWer, &base, &tr, &he).unwrap();
    let ns: Vec<usize> = fig2c.summary.iter().map(|r| r.n).collect();
    assert_eq!(ns, vec![1, 2, 4, 8]);
    assert!(fig2c.summary.iter().all(|r| r.final_wer.is_some() && r.variant == LossVariant::MwerNbest));

    let fig4 = run_experiment_suite(ExperimentKind::Fig4LambdaSweep, &base, &tr, &he).unwrap();
    let lambdas: Vec<f64> = fig4.summary.iter().map(|r| r.lambda).collect();
    assert_eq!(lambdas, vec![0.0, 0.001, 0.01, 0.1, 1.0]);
    assert_eq!(summary_table(&fig4.summary).lines().count(), 6);

    let out = dir.path().join("fig4");
    write_bundle(&fig4, &out).unwrap();
    assert!(out.join("summary.tsv").exists());
    assert!(out.join("mwer_nbest_n4_lambda0.01").join("metrics.jsonl").exists());

    let fig2a = ExperimentKind::Fig2aSampleExpectedErrors.settings(&base.loss);
    assert!(fig2a.iter().all(|l| l.variant == LossVariant::MwerSample));
    assert_eq!("fig2b".parse::<ExperimentKind>().unwrap(), ExperimentKind::Fig2bSampleWer);
}

#[test]
fn noise_free_ce_baseline() {
    let spec = TaskSpec {
        noise_std: 0.0,
        seed: 1,
        ..TaskSpec::default()
    };
    let (tr, he, _) = split(&generate(&spec, 800).unwrap(), [0.8, 0.1, 0.1], 1).unwrap();
    let cfg = TrainConfig {
        max_steps: 1500,
        eval_every: 1500,
        seed: 1,
        ..TrainConfig::ce()
    };
    let out = train(&cfg, &tr, &he).unwrap();
    let wer = out.records.last().unwrap().heldout_wer.unwrap();
    // pinned from the reference run: 0.62%
    assert!(wer < 2.0, "held-out WER {wer}");
}
