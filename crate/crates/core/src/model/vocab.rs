use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SOS: &str = "<sos>";
pub const EOS: &str = "<eos>";
pub const SP: &str = "<sp>";

/// Ordered label set with the reserved start, end and word-separator symbols.
///
/// `<sos>` only ever conditions the decoder; it is never emitted, so the
/// output distribution ranges over the remaining `len() - 1` labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
    sos: usize,
    eos: usize,
    sp: usize,
}

impl Vocabulary {
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate symbol {s:?}")));
            }
        }
        let find = |s: &str| {
            index
                .get(s)
                .copied()
                .ok_or_else(|| Error::Config(format!("vocabulary lacks {s}")))
        };
        let (sos, eos, sp) = (find(SOS)?, find(EOS)?, find(SP)?);
        Ok(Self {
            symbols,
            index,
            sos,
            eos,
            sp,
        })
    }

    /// `<sos>`, `<eos>`, `<sp>` followed by `graphemes` in the given order.
    pub fn with_graphemes<I, S>(graphemes: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut symbols = vec![SOS.to_string(), EOS.to_string(), SP.to_string()];
        symbols.extend(graphemes.into_iter().map(Into::into));
        Self::new(symbols)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Number of labels the decoder can emit.
    pub fn output_size(&self) -> usize {
        self.symbols.len() - 1
    }

    pub fn sos(&self) -> usize {
        self.sos
    }

    pub fn eos(&self) -> usize {
        self.eos
    }

    pub fn sp(&self) -> usize {
        self.sp
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    /// Labels the decoder may emit, ascending.
    pub fn emittable(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&g| g != self.sos)
    }

    pub fn encode(&self, symbols: &[&str]) -> Result<Vec<usize>> {
        symbols
            .iter()
            .map(|s| {
                self.id(s)
                    .ok_or_else(|| Error::Config(format!("unknown symbol {s:?}")))
            })
            .collect()
    }

    /// Grapheme labels of `words` joined by `<sp>` and framed by `<sos>`/`<eos>`.
    pub fn frame_words<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<usize>> {
        let mut labels = vec![self.sos];
        for (i, w) in words.iter().enumerate() {
            if i > 0 {
                labels.push(self.sp);
            }
            for ch in w.as_ref().chars() {
                let id = self
                    .id(ch.encode_utf8(&mut [0; 4]))
                    .ok_or_else(|| Error::Config(format!("grapheme {ch:?} not in vocabulary")))?;
                labels.push(id);
            }
        }
        labels.push(self.eos);
        Ok(labels)
    }

    pub fn render(&self, labels: &[usize]) -> String {
        labels
            .iter()
            .map(|&l| self.symbol(l).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(symbols: Vec<String>) -> Result<Self> {
        Self::new(symbols)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.symbols
    }
}

/// Check that `labels` is `<sos> ... <eos>` with neither symbol in between.
pub fn check_framed(vocab: &Vocabulary, labels: &[usize]) -> Result<()> {
    let framed = labels.len() >= 2
        && labels[0] == vocab.sos()
        && labels[labels.len() - 1] == vocab.eos()
        && labels[1..labels.len() - 1]
            .iter()
            .all(|&l| l != vocab.sos() && l != vocab.eos());
    if !framed {
        return Err(Error::Contract(format!(
            "label sequence is not framed by {SOS}/{EOS}: {}",
            vocab.render(labels)
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= vocab.len()) {
        return Err(Error::Contract(format!("label {bad} outside vocabulary")));
    }
    Ok(())
}

/// Feature sequence paired with its framed target labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `[T x d]`
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl Utterance {
    pub fn new(
        id: impl Into<String>,
        features: Tensor,
        labels: Vec<usize>,
        vocab: &Vocabulary,
    ) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::Config(format!(
                "features must be [T x d], got {:?}",
                features.shape()
            )));
        }
        check_framed(vocab, &labels)?;
        Ok(Self {
            id: id.into(),
            features,
            labels,
        })
    }

    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[1]
    }
}
