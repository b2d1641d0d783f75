//! Optimizer, training loop, evaluation and experiment sweeps.

pub mod adam;
pub mod eval;
pub mod experiment;
pub mod train;

use std::fs;
use std::path::Path;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use eval::{evaluate, EvalConfig, EvalReport, UtteranceResult};
pub use experiment::{run_experiment_suite, summary_table, write_bundle, ExperimentBundle, ExperimentKind, SummaryRow};
pub use train::{
    initial_params, read_metrics, records_to_jsonl, train, train_from, write_outcome, MetricsRecord, RunFiles, Stage,
    TimingRecord, TrainConfig, TrainOutcome, TrainStatus,
};

use crate::error::{Error, Result};

/// Parse a flat `key = value` file. Blank lines and `#` comments are
/// skipped; keys may be written with `_` or `-`.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
        let key = key.trim().replace('_', "-");
        if key.is_empty() {
            return Err(Error::Format(format!("line {}: empty key", i + 1)));
        }
        out.push((key, value.trim().to_string()));
    }
    Ok(out)
}

pub fn read_config_file(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_text(&text).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
