//! Python bindings: model construction, decoding, losses, word errors and the
//! synthetic data generator. Features cross the boundary as lists of rows.

use mwer_core::data::{self, TaskSpec};
use mwer_core::decoding::{self, Hypothesis};
use mwer_core::losses::{composite_loss, LossConfig, LossReport, LossVariant};
use mwer_core::metrics::{self, WordErrorStats};
use mwer_core::model::{checkpoint, ModelConfig, ModelParams, Utterance, Vocabulary};
use mwer_core::tensor::Tensor;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: mwer_core::Error) -> PyErr {
    use mwer_core::Error;
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Config(_) | Error::Contract(_) | Error::Format(_) | Error::Tensor(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn features_tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let t = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("feature rows must have equal length"));
    }
    Tensor::new(vec![t, d], rows.concat()).map_err(|e| py_err(e.into()))
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.shape()[1].max(1)).map(<[f64]>::to_vec).collect()
}

/// Attention encoder-decoder over a grapheme vocabulary.
#[pyclass(name = "Model", module = "mwer")]
struct PyModel {
    inner: ModelParams,
}

impl PyModel {
    fn utterance(&self, features: Vec<Vec<f64>>, words: &[String]) -> PyResult<Utterance> {
        let vocab = &self.inner.vocab;
        let labels = vocab.frame_words(words).map_err(py_err)?;
        Utterance::new("py", features_tensor(features)?, labels, vocab).map_err(py_err)
    }

    fn hyp_tuple(&self, h: &Hypothesis) -> (Vec<String>, f64, bool) {
        (metrics::to_words(&h.labels, &self.inner.vocab), h.log_prob, h.complete)
    }

    fn max_len_for(&self, features: &[Vec<f64>], max_len: Option<usize>) -> usize {
        max_len.unwrap_or_else(|| decoding::default_max_len(features.len()))
    }
}

#[pymethods]
impl PyModel {
    /// Fresh model. `compact` selects the small single-layer configuration.
    #[new]
    #[pyo3(signature = (graphemes, feature_dim, seed=0, scale=0.1, compact=true))]
    fn new(graphemes: Vec<String>, feature_dim: usize, seed: u64, scale: f64, compact: bool) -> PyResult<Self> {
        let vocab = Vocabulary::with_graphemes(graphemes).map_err(py_err)?;
        let base = if compact { ModelConfig::compact() } else { ModelConfig::default() };
        let config = ModelConfig { feature_dim, ..base };
        let inner = ModelParams::init(config, vocab, scale, seed).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        checkpoint::load(path).map(|inner| Self { inner }).map_err(py_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        checkpoint::save(&self.inner, path).map_err(py_err)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    #[getter]
    fn symbols(&self) -> Vec<String> {
        self.inner.vocab.symbols().to_vec()
    }

    /// Log-probability of the framed transcript `words`.
    fn sequence_logprob(&self, features: Vec<Vec<f64>>, words: Vec<String>) -> PyResult<f64> {
        let utt = self.utterance(features, &words)?;
        self.inner.sequence_logprob(&utt.features, &utt.labels).map_err(py_err)
    }

    /// N-best list as `(words, log_prob, complete)` tuples, best first.
    #[pyo3(signature = (features, beam_size=8, max_len=None))]
    fn beam_search(
        &self,
        features: Vec<Vec<f64>>,
        beam_size: usize,
        max_len: Option<usize>,
    ) -> PyResult<Vec<(Vec<String>, f64, bool)>> {
        let max_len = self.max_len_for(&features, max_len);
        let enc = self.inner.encode(&features_tensor(features)?).map_err(py_err)?;
        let list = decoding::beam_search(&self.inner, &enc, beam_size, max_len).map_err(py_err)?;
        Ok(list.hypotheses.iter().map(|h| self.hyp_tuple(h)).collect())
    }

    #[pyo3(signature = (features, count, seed, max_len=None))]
    fn sample(
        &self,
        features: Vec<Vec<f64>>,
        count: usize,
        seed: u64,
        max_len: Option<usize>,
    ) -> PyResult<Vec<(Vec<String>, f64, bool)>> {
        let max_len = self.max_len_for(&features, max_len);
        let enc = self.inner.encode(&features_tensor(features)?).map_err(py_err)?;
        let hyps = decoding::sample_sequences(&self.inner, &enc, count, max_len, seed).map_err(py_err)?;
        Ok(hyps.iter().map(|h| self.hyp_tuple(h)).collect())
    }

    /// Loss report and flat gradient for one utterance. `variant` is one of
    /// `ce`, `mwer_sample`, `mwer_nbest`.
    #[pyo3(signature = (features, words, variant="mwer_nbest", n=4, lam=0.01, seed=None, max_len=None))]
    #[allow(clippy::too_many_arguments)]
    fn loss<'py>(
        &self,
        py: Python<'py>,
        features: Vec<Vec<f64>>,
        words: Vec<String>,
        variant: &str,
        n: usize,
        lam: f64,
        seed: Option<u64>,
        max_len: Option<usize>,
    ) -> PyResult<(Bound<'py, PyDict>, Vec<f64>)> {
        let utt = self.utterance(features, &words)?;
        let cfg = LossConfig {
            variant: variant.parse::<LossVariant>().map_err(py_err)?,
            n,
            lambda: lam,
            max_len,
        };
        let (report, grads) = composite_loss(&self.inner, &utt, &cfg, seed).map_err(py_err)?;
        Ok((report_dict(py, &report)?, grads.tensors.concat()))
    }

    fn parameters(&self) -> Vec<f64> {
        self.inner.flatten()
    }

    fn set_parameters(&mut self, flat: Vec<f64>) -> PyResult<()> {
        self.inner.set_flat(&flat).map_err(py_err)
    }
}

fn report_dict<'py>(py: Python<'py>, r: &LossReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("total_loss", r.total_loss)?;
    d.set_item("werr_term", r.werr_term)?;
    d.set_item("ce_term", r.ce_term)?;
    d.set_item("baseline_w_hat", r.baseline_w_hat)?;
    d.set_item("hypotheses_used", r.hypotheses_used)?;
    d.set_item("expected_word_errors_estimate", r.expected_word_errors_estimate)?;
    Ok(d)
}

fn stats_dict<'py>(py: Python<'py>, s: &WordErrorStats) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("substitutions", s.substitutions)?;
    d.set_item("insertions", s.insertions)?;
    d.set_item("deletions", s.deletions)?;
    d.set_item("reference_words", s.reference_words)?;
    d.set_item("total", s.total())?;
    Ok(d)
}

/// Minimum substitutions, insertions and deletions turning `reference` into `hypothesis`.
#[pyfunction]
fn word_errors<'py>(py: Python<'py>, hypothesis: Vec<String>, reference: Vec<String>) -> PyResult<Bound<'py, PyDict>> {
    stats_dict(py, &metrics::word_errors(&hypothesis, &reference))
}

/// Corpus WER in percent over `(hypothesis, reference)` word-list pairs.
#[pyfunction]
fn corpus_wer(pairs: Vec<(Vec<String>, Vec<String>)>) -> PyResult<f64> {
    let mut total = WordErrorStats::default();
    for (h, r) in &pairs {
        let s = metrics::word_errors(h, r);
        total.substitutions += s.substitutions;
        total.insertions += s.insertions;
        total.deletions += s.deletions;
        total.reference_words += s.reference_words;
    }
    metrics::wer_percent(&total).map_err(py_err)
}

/// Synthetic utterances as `(id, words, feature_rows)` plus the vocabulary symbols.
#[pyfunction]
#[pyo3(signature = (count, seed=0, noise_std=None))]
#[allow(clippy::type_complexity)]
fn generate_data(
    count: usize,
    seed: u64,
    noise_std: Option<f64>,
) -> PyResult<(Vec<String>, Vec<(String, Vec<String>, Vec<Vec<f64>>)>)> {
    let mut spec = TaskSpec {
        seed,
        ..TaskSpec::default()
    };
    if let Some(s) = noise_std {
        spec.noise_std = s;
    }
    let ds = data::generate(&spec, count).map_err(py_err)?;
    let graphemes = ds.vocab.symbols().to_vec();
    let utts = ds
        .utterances
        .iter()
        .map(|u| (u.id.clone(), metrics::to_words(&u.labels, &ds.vocab), rows_of(&u.features)))
        .collect();
    Ok((graphemes, utts))
}

#[pymodule]
fn mwer(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(word_errors, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_wer, m)?)?;
    m.add_function(wrap_pyfunction!(generate_data, m)?)?;
    Ok(())
}
