use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::eval::{evaluate, EvalConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{composite_loss, Gradients, LossConfig, LossReport, LossVariant};
use crate::model::{checkpoint, ModelConfig, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ce,
    Mwer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub loss: LossConfig,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub seed: u64,
    /// Required for the MWER stage; optional warm start for CE.
    pub init_checkpoint: Option<PathBuf>,
    /// Architecture for a fresh CE model.
    pub model: ModelConfig,
    /// Half-width of the uniform initializer.
    pub init_scale: f64,
    pub eval: EvalConfig,
}

/// Default Adam step sizes; fine-tuning uses a tenth of the CE rate.
pub const CE_STEP_SIZE: f64 = 1e-2;
pub const MWER_STEP_SIZE: f64 = 1e-3;

impl TrainConfig {
    pub fn ce() -> Self {
        Self {
            stage: Stage::Ce,
            loss: LossConfig::ce(),
            optimizer: AdamConfig {
                step_size: CE_STEP_SIZE,
                ..AdamConfig::default()
            },
            batch_size: 8,
            max_steps: 5000,
            eval_every: 500,
            seed: 0,
            init_checkpoint: None,
            model: ModelConfig::compact(),
            init_scale: 0.1,
            eval: EvalConfig::default(),
        }
    }

    pub fn mwer(init_checkpoint: impl Into<PathBuf>) -> Self {
        Self {
            stage: Stage::Mwer,
            loss: LossConfig::nbest(4, 0.01),
            optimizer: AdamConfig {
                step_size: MWER_STEP_SIZE,
                ..AdamConfig::default()
            },
            max_steps: 400,
            eval_every: 100,
            init_checkpoint: Some(init_checkpoint.into()),
            ..Self::ce()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.optimizer.validate()?;
        match (self.stage, self.loss.variant) {
            (Stage::Ce, LossVariant::Ce) => {}
            (Stage::Mwer, LossVariant::MwerNbest | LossVariant::MwerSample) => {}
            (stage, variant) => {
                return Err(Error::Config(format!("stage {stage:?} cannot train loss {variant:?}")));
            }
        }
        if self.stage == Stage::Mwer && self.init_checkpoint.is_none() {
            return Err(Error::Config("MWER stage needs init_checkpoint (a CE-trained model)".into()));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        if self.eval.beam_size == 0 {
            return Err(Error::Config("eval beam size must be positive".into()));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config(format!("init_scale must be >= 0, got {}", self.init_scale)));
        }
        self.model.validate()
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub stage: Stage,
    /// Mean training loss over the steps since the previous record.
    pub train: Option<LossReport>,
    pub heldout_wer: Option<f64>,
    pub heldout_sampled_expected_errors: Option<f64>,
    pub heldout_nbest_expected_errors: Option<f64>,
    /// Set when training aborted at this step.
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub step: usize,
    pub elapsed_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainStatus {
    Completed,
    NonFinite { step: usize, detail: String },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub records: Vec<MetricsRecord>,
    pub timing: Vec<TimingRecord>,
    pub status: TrainStatus,
}

/// Initial parameters: the checkpoint if configured, else a seeded fresh model.
pub fn initial_params(cfg: &TrainConfig, data: &Dataset) -> Result<ModelParams> {
    let params = match &cfg.init_checkpoint {
        Some(path) => checkpoint::load(path)?,
        None => {
            let model = ModelConfig {
                feature_dim: data.spec.feature_dim,
                ..cfg.model
            };
            ModelParams::init(model, data.vocab.clone(), cfg.init_scale, cfg.seed)?
        }
    };
    check_compatible(&params, data)?;
    Ok(params)
}

fn check_compatible(params: &ModelParams, data: &Dataset) -> Result<()> {
    if params.vocab != data.vocab {
        return Err(Error::Config(format!(
            "model vocabulary {:?} differs from dataset vocabulary {:?}",
            params.vocab.symbols(),
            data.vocab.symbols()
        )));
    }
    if let Some(u) = data.utterances.first() {
        if u.feature_dim() != params.config.feature_dim {
            return Err(Error::Config(format!(
                "dataset has {}-dim features, model expects {}",
                u.feature_dim(),
                params.config.feature_dim
            )));
        }
    }
    Ok(())
}

/// Loads or initializes the model per `cfg`, then trains it.
pub fn train(cfg: &TrainConfig, train_set: &Dataset, heldout: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    let params = initial_params(cfg, train_set)?;
    train_from(params, cfg, train_set, heldout)
}

fn mean_reports(reports: &[LossReport]) -> LossReport {
    let n = reports.len() as f64;
    let sum = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    LossReport {
        total_loss: sum(|r| r.total_loss),
        werr_term: sum(|r| r.werr_term),
        ce_term: sum(|r| r.ce_term),
        baseline_w_hat: sum(|r| r.baseline_w_hat),
        hypotheses_used: reports.iter().map(|r| r.hypotheses_used).sum::<usize>() / reports.len().max(1),
        expected_word_errors_estimate: sum(|r| r.expected_word_errors_estimate),
    }
}

/// Mini-batch training from the given parameters.
///
/// A held-out evaluation runs before the first step, every `eval_every`
/// steps and after the last step. A non-finite loss or gradient stops
/// training and is reported through the final record and the status.
pub fn train_from(
    mut params: ModelParams,
    cfg: &TrainConfig,
    train_set: &Dataset,
    heldout: &Dataset,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_compatible(&params, train_set)?;
    check_compatible(&params, heldout)?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let start = Instant::now();
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x05ee_d5a3_b1e5_u64);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    order.shuffle(&mut order_rng);
    let mut cursor = 0;
    let mut adam = AdamState::new(&params);
    let mut records = Vec::new();
    let mut timing = Vec::new();
    let mut pending: Vec<LossReport> = Vec::new();

    let mut record = |step: usize, params: &ModelParams, pending: &mut Vec<LossReport>| -> Result<MetricsRecord> {
        let train = (!pending.is_empty()).then(|| mean_reports(pending));
        pending.clear();
        let (wer, sampled, nbest) = if heldout.is_empty() {
            (None, None, None)
        } else {
            let r = evaluate(params, heldout, &cfg.eval)?;
            (Some(r.wer), Some(r.sampled_expected_errors), Some(r.nbest_expected_errors))
        };
        timing.push(TimingRecord {
            step,
            elapsed_seconds: start.elapsed().as_secs_f64(),
        });
        Ok(MetricsRecord {
            step,
            stage: cfg.stage,
            train,
            heldout_wer: wer,
            heldout_sampled_expected_errors: sampled,
            heldout_nbest_expected_errors: nbest,
            diagnostic: None,
        })
    };

    records.push(record(0, &params, &mut pending)?);
    for step in 1..=cfg.max_steps {
        let mut grad_sum = Gradients::zeros_like(&params);
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            let utt = &train_set.utterances[order[cursor]];
            cursor += 1;
            let seed: u64 = sample_rng.random();
            let (report, grads) = composite_loss(&params, utt, &cfg.loss, Some(seed))?;
            let decomposition = report.decomposition_error(cfg.loss.lambda, cfg.loss.variant);
            if !(report.total_loss.is_finite() && grads.is_finite()) {
                let detail = format!(
                    "non-finite loss or gradient on utterance {} (total {}, werr {}, ce {})",
                    utt.id, report.total_loss, report.werr_term, report.ce_term
                );
                records.push(MetricsRecord {
                    step,
                    stage: cfg.stage,
                    train: Some(report),
                    heldout_wer: None,
                    heldout_sampled_expected_errors: None,
                    heldout_nbest_expected_errors: None,
                    diagnostic: Some(detail.clone()),
                });
                return Ok(TrainOutcome {
                    params,
                    records,
                    timing,
                    status: TrainStatus::NonFinite { step, detail },
                });
            }
            if decomposition > 1e-12 {
                return Err(Error::Contract(format!(
                    "loss decomposition off by {decomposition} on utterance {}",
                    utt.id
                )));
            }
            grad_sum.add_scaled(&grads, 1.0);
            batch.push(report);
        }
        grad_sum.scale(1.0 / cfg.batch_size as f64);
        adam_step(&mut params, &grad_sum, &mut adam, &cfg.optimizer)?;
        pending.push(mean_reports(&batch));
        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            records.push(record(step, &params, &mut pending)?);
        }
    }
    Ok(TrainOutcome {
        params,
        records,
        timing,
        status: TrainStatus::Completed,
    })
}

/// Serialize records one JSON object per line.
pub fn records_to_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Files written by [`write_outcome`].
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub timing: PathBuf,
}

impl RunFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            checkpoint: dir.join("model.ckpt"),
            metrics: dir.join("metrics.jsonl"),
            timing: dir.join("timing.jsonl"),
        }
    }
}

/// Write the final checkpoint, the metrics log and the wall-clock sidecar.
pub fn write_outcome(outcome: &TrainOutcome, dir: &Path) -> Result<RunFiles> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = RunFiles::in_dir(dir);
    checkpoint::save(&outcome.params, &files.checkpoint)?;
    for (path, body) in [
        (&files.metrics, records_to_jsonl(&outcome.records)),
        (&files.timing, records_to_jsonl(&outcome.timing)),
    ] {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))?;
    }
    Ok(files)
}
