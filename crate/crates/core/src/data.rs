//! Synthetic transduction task: words spelled as grapheme labels, each
//! grapheme rendered as a noisy prototype frame held for a random duration.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::to_words;
use crate::model::{Utterance, Vocabulary};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub vocab_words: Vec<String>,
    /// Inclusive `[min, max]`.
    pub words_per_utterance: [usize; 2],
    /// Inclusive `[min, max]`.
    pub frames_per_grapheme: [usize; 2],
    pub feature_dim: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            vocab_words: ["cat", "cab", "tab", "bat", "act", "tact", "abba", "scab"]
                .map(String::from)
                .to_vec(),
            words_per_utterance: [1, 3],
            frames_per_grapheme: [1, 3],
            feature_dim: 8,
            noise_std: 0.4,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_words.is_empty() || self.vocab_words.iter().any(String::is_empty) {
            return Err(Error::Config("vocab_words must be a nonempty list of nonempty words".into()));
        }
        for (name, [lo, hi]) in [
            ("words_per_utterance", self.words_per_utterance),
            ("frames_per_grapheme", self.frames_per_grapheme),
        ] {
            if lo == 0 || lo > hi {
                return Err(Error::Config(format!("{name} must be 1 <= min <= max, got [{lo}, {hi}]")));
            }
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        Ok(())
    }

    /// Reserved symbols followed by the sorted graphemes of the word list.
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let graphemes: BTreeSet<char> = self.vocab_words.iter().flat_map(|w| w.chars()).collect();
        Vocabulary::with_graphemes(graphemes.into_iter().map(String::from))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: String,
    pub vocab: Vocabulary,
    pub spec: TaskSpec,
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

/// Unit-norm prototype per frame-producing label (`<sp>` and every grapheme),
/// indexed by label id. Orthonormal when they fit in `feature_dim`, otherwise
/// random directions kept at least 1.0 apart where possible.
fn draw_prototypes(vocab: &Vocabulary, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Option<Vec<f64>>> {
    let labels: Vec<usize> = vocab.emittable().filter(|&l| l != vocab.eos()).collect();
    let unit = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    };
    let mut chosen: Vec<Vec<f64>> = Vec::with_capacity(labels.len());
    for _ in &labels {
        let v = if chosen.len() < dim {
            // Gram-Schmidt against the vectors already chosen
            let mut v = unit(rng);
            for u in &chosen {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        } else {
            let mut best = unit(rng);
            let min_dist = |v: &[f64], chosen: &[Vec<f64>]| {
                chosen
                    .iter()
                    .map(|u| u.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                    .fold(f64::INFINITY, f64::min)
            };
            let mut best_dist = min_dist(&best, &chosen);
            for _ in 0..10_000 {
                if best_dist >= 1.0 {
                    break;
                }
                let c = unit(rng);
                let d = min_dist(&c, &chosen);
                if d > best_dist {
                    best = c;
                    best_dist = d;
                }
            }
            best
        };
        chosen.push(v);
    }
    let mut table = vec![None; vocab.len()];
    for (l, v) in labels.into_iter().zip(chosen) {
        table[l] = Some(v);
    }
    table
}

/// Frame prototypes used by [`generate`], by label id (`None` for `<sos>`
/// and `<eos>`, which produce no frames).
pub fn prototypes(spec: &TaskSpec) -> Result<Vec<Option<Vec<f64>>>> {
    spec.validate()?;
    let vocab = spec.vocabulary()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok(draw_prototypes(&vocab, spec.feature_dim, &mut rng))
}

/// Generate `count` utterances. Deterministic in `(spec, count)`.
pub fn generate(spec: &TaskSpec, count: usize) -> Result<Dataset> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::Config("count must be at least 1".into()));
    }
    let vocab = spec.vocabulary()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let protos = draw_prototypes(&vocab, spec.feature_dim, &mut rng);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut utterances = Vec::with_capacity(count);
    for i in 0..count {
        let [wlo, whi] = spec.words_per_utterance;
        let n_words = rng.random_range(wlo..=whi);
        let words: Vec<&str> = (0..n_words)
            .map(|_| spec.vocab_words[rng.random_range(0..spec.vocab_words.len())].as_str())
            .collect();
        let labels = vocab.frame_words(&words)?;
        let mut frames = Vec::new();
        for &l in &labels[1..labels.len() - 1] {
            let proto = protos[l].as_ref().expect("frame-producing label has a prototype");
            let [flo, fhi] = spec.frames_per_grapheme;
            for _ in 0..rng.random_range(flo..=fhi) {
                frames.extend(proto.iter().map(|&p| {
                    if spec.noise_std > 0.0 {
                        p + noise.sample(&mut rng)
                    } else {
                        p
                    }
                }));
            }
        }
        let t = frames.len() / spec.feature_dim;
        let features = Tensor::new(vec![t, spec.feature_dim], frames)?;
        utterances.push(Utterance::new(format!("utt{i:05}"), features, labels, &vocab)?);
    }
    Ok(Dataset {
        split: "all".into(),
        vocab,
        spec: spec.clone(),
        utterances,
    })
}

/// Seeded shuffle into train / held-out / test with the given fractions.
pub fn split(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    if fractions.iter().any(|&f| !(f > 0.0 && f < 1.0)) {
        return Err(Error::Config(format!("split fractions must lie in (0, 1), got {fractions:?}")));
    }
    if (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions must sum to 1, got {fractions:?}")));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_held = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let part = |name: &str, idx: &[usize]| Dataset {
        split: name.into(),
        vocab: dataset.vocab.clone(),
        spec: dataset.spec.clone(),
        utterances: idx.iter().map(|&i| dataset.utterances[i].clone()).collect(),
    };
    Ok((
        part("train", &order[..n_train]),
        part("heldout", &order[n_train..n_train + n_held]),
        part("test", &order[n_train + n_held..]),
    ))
}

#[derive(Serialize, Deserialize)]
struct Header {
    split: String,
    vocabulary: Vocabulary,
    task_spec: TaskSpec,
    utterances: usize,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    words: Vec<String>,
    features: Vec<Vec<f64>>,
}

/// Path of the header that accompanies a dataset file.
pub fn header_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".header.json");
    PathBuf::from(s)
}

/// Serialize records, one JSON object per line.
pub fn records_to_string(dataset: &Dataset) -> String {
    let mut out = String::new();
    for u in &dataset.utterances {
        let rec = Record {
            id: u.id.clone(),
            words: to_words(&u.labels, &dataset.vocab),
            features: (0..u.frames()).map(|t| u.features.row(t).to_vec()).collect(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Write `path` (records) and `path.header.json` (split, vocabulary, task spec).
pub fn save(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = Header {
        split: dataset.split.clone(),
        vocabulary: dataset.vocab.clone(),
        task_spec: dataset.spec.clone(),
        utterances: dataset.len(),
    };
    let hp = header_path(path);
    let header_json = serde_json::to_string_pretty(&header).expect("header serializes");
    fs::write(&hp, header_json + "\n").map_err(|e| Error::io(&hp, e))?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(records_to_string(dataset).as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let hp = header_path(path);
    let header_text = fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
    let header: Header = serde_json::from_str(&header_text)
        .map_err(|e| Error::Format(format!("{}: {e}", hp.display())))?;
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut utterances = Vec::with_capacity(header.utterances);
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        let labels = header.vocabulary.frame_words(&rec.words)?;
        let features = Tensor::from_rows(&rec.features)?;
        utterances.push(Utterance::new(rec.id, features, labels, &header.vocabulary)?);
    }
    if utterances.len() != header.utterances {
        return Err(Error::Format(format!(
            "{}: header promises {} utterances, found {}",
            path.display(),
            header.utterances,
            utterances.len()
        )));
    }
    Ok(Dataset {
        split: header.split,
        vocab: header.vocabulary,
        spec: header.task_spec,
        utterances,
    })
}
