use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::train::{initial_params, records_to_jsonl, train_from, write_outcome, MetricsRecord, TrainConfig, TrainStatus};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossVariant};

pub const SWEEP_N: [usize; 4] = [1, 2, 4, 8];
pub const SWEEP_LAMBDA: [f64; 5] = [0.0, 0.001, 0.01, 0.1, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// Sampling loss over N; tracks the sampled expected word errors.
    Fig2aSampleExpectedErrors,
    /// Sampling loss over N; tracks beam search WER.
    Fig2bSampleWer,
    /// N-best loss over N; tracks beam search WER.
    Fig2cNbestWer,
    /// N-best loss over the CE weight.
    Fig4LambdaSweep,
}

impl ExperimentKind {
    pub const ALL: [Self; 4] = [
        Self::Fig2aSampleExpectedErrors,
        Self::Fig2bSampleWer,
        Self::Fig2cNbestWer,
        Self::Fig4LambdaSweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Fig2aSampleExpectedErrors => "fig2a_sample_expected_errors",
            Self::Fig2bSampleWer => "fig2b_sample_wer",
            Self::Fig2cNbestWer => "fig2c_nbest_wer",
            Self::Fig4LambdaSweep => "fig4_lambda_sweep",
        }
    }

    /// Loss configurations of the sweep, in output order.
    pub fn settings(self, base: &LossConfig) -> Vec<LossConfig> {
        let with = |variant, n, lambda| LossConfig {
            variant,
            n,
            lambda,
            max_len: base.max_len,
        };
        match self {
            Self::Fig2aSampleExpectedErrors | Self::Fig2bSampleWer => SWEEP_N
                .iter()
                .map(|&n| with(LossVariant::MwerSample, n, base.lambda))
                .collect(),
            Self::Fig2cNbestWer => SWEEP_N
                .iter()
                .map(|&n| with(LossVariant::MwerNbest, n, base.lambda))
                .collect(),
            Self::Fig4LambdaSweep => SWEEP_LAMBDA
                .iter()
                .map(|&l| with(LossVariant::MwerNbest, base.n, l))
                .collect(),
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s || k.name().split('_').next() == Some(s))
            .ok_or_else(|| Error::Config(format!("unknown experiment {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: LossVariant,
    pub n: usize,
    pub lambda: f64,
    pub initial_wer: Option<f64>,
    pub final_wer: Option<f64>,
    pub initial_sampled_expected_errors: Option<f64>,
    pub final_sampled_expected_errors: Option<f64>,
    pub final_nbest_expected_errors: Option<f64>,
    pub completed: bool,
}

#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub loss: LossConfig,
    pub outcome: super::train::TrainOutcome,
}

#[derive(Debug, Clone)]
pub struct ExperimentBundle {
    pub kind: ExperimentKind,
    pub runs: Vec<ExperimentRun>,
    pub summary: Vec<SummaryRow>,
}

fn summarize(loss: &LossConfig, records: &[MetricsRecord], completed: bool) -> SummaryRow {
    let evals: Vec<&MetricsRecord> = records.iter().filter(|r| r.heldout_wer.is_some()).collect();
    let first = evals.first();
    let last = evals.last();
    SummaryRow {
        variant: loss.variant,
        n: loss.n,
        lambda: loss.lambda,
        initial_wer: first.and_then(|r| r.heldout_wer),
        final_wer: last.and_then(|r| r.heldout_wer),
        initial_sampled_expected_errors: first.and_then(|r| r.heldout_sampled_expected_errors),
        final_sampled_expected_errors: last.and_then(|r| r.heldout_sampled_expected_errors),
        final_nbest_expected_errors: last.and_then(|r| r.heldout_nbest_expected_errors),
        completed,
    }
}

/// Fine-tune the checkpoint in `base.init_checkpoint` once per sweep setting.
/// Every run starts from the same parameters and uses `base.seed`.
pub fn run_experiment_suite(
    kind: ExperimentKind,
    base: &TrainConfig,
    train_set: &Dataset,
    heldout: &Dataset,
) -> Result<ExperimentBundle> {
    base.validate()?;
    let start = initial_params(base, train_set)?;
    let mut runs = Vec::new();
    let mut summary = Vec::new();
    for loss in kind.settings(&base.loss) {
        let cfg = TrainConfig {
            loss: loss.clone(),
            ..base.clone()
        };
        let outcome = train_from(start.clone(), &cfg, train_set, heldout)?;
        summary.push(summarize(&loss, &outcome.records, outcome.status == TrainStatus::Completed));
        runs.push(ExperimentRun { loss, outcome });
    }
    Ok(ExperimentBundle { kind, runs, summary })
}

fn run_dir_name(loss: &LossConfig) -> String {
    format!("{}_n{}_lambda{}", serde_json::to_value(loss.variant).unwrap().as_str().unwrap(), loss.n, loss.lambda)
}

fn cell(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

/// Tab-separated summary table with a header line.
pub fn summary_table(rows: &[SummaryRow]) -> String {
    let mut out = String::from(
        "variant\tn\tlambda\tinitial_wer\tfinal_wer\tinitial_sampled_ewe\tfinal_sampled_ewe\tfinal_nbest_ewe\tcompleted\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            serde_json::to_value(r.variant).unwrap().as_str().unwrap(),
            r.n,
            r.lambda,
            cell(r.initial_wer),
            cell(r.final_wer),
            cell(r.initial_sampled_expected_errors),
            cell(r.final_sampled_expected_errors),
            cell(r.final_nbest_expected_errors),
            r.completed
        ));
    }
    out
}

/// `dir/<run>/{model.ckpt,metrics.jsonl,timing.jsonl}` per setting, plus
/// `summary.jsonl` and `summary.tsv`.
pub fn write_bundle(bundle: &ExperimentBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for run in &bundle.runs {
        write_outcome(&run.outcome, &dir.join(run_dir_name(&run.loss)))?;
    }
    let jsonl = dir.join("summary.jsonl");
    fs::write(&jsonl, records_to_jsonl(&bundle.summary)).map_err(|e| Error::io(&jsonl, e))?;
    let tsv = dir.join("summary.tsv");
    fs::write(&tsv, summary_table(&bundle.summary)).map_err(|e| Error::io(&tsv, e))
}
