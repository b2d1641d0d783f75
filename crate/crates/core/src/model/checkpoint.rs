//! Binary checkpoint format.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic       8 bytes   "MWERCKPT"
//! version     u32       1
//! vocab       u32 count, then per symbol: u32 byte length, UTF-8 bytes
//! config      u32 byte length, JSON-encoded ModelConfig
//! params      u32 count, then per parameter:
//!               u32 name length, UTF-8 name,
//!               u32 rank, rank x u64 dims,
//!               product(dims) x f64 values
//! ```

use std::fs;
use std::path::Path;

use super::params::{ModelConfig, ModelParams};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MWERCKPT";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

pub fn to_bytes(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * params.num_parameters());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, params.vocab.len());
    for s in params.vocab.symbols() {
        put_str(&mut out, s);
    }
    let config = serde_json::to_string(&params.config).expect("config serializes");
    put_str(&mut out, &config);
    put_u32(&mut out, params.tensors.len());
    for (name, t) in params.names.iter().zip(&params.tensors) {
        put_str(&mut out, name);
        put_u32(&mut out, t.shape().len());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|e| Error::Format(format!("bad UTF-8: {e}")))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let n_symbols = r.u32()?;
    let symbols = (0..n_symbols).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let vocab = Vocabulary::new(symbols)?;
    let config: ModelConfig = serde_json::from_str(&r.string()?)
        .map_err(|e| Error::Format(format!("bad model config: {e}")))?;
    let n_params = r.u32()?;
    let mut named = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = r.string()?;
        let rank = r.u32()?;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        named.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    ModelParams::from_named(config, vocab, named)
}

pub fn save(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ModelParams {
        let cfg = ModelConfig {
            encoder_cell: 4,
            decoder_cell: 4,
            attention_dim: 3,
            context_dim: 2,
            embedding_dim: 3,
            ..ModelConfig::default()
        };
        let vocab = Vocabulary::with_graphemes(["a", "b"]).unwrap();
        ModelParams::init(cfg, vocab, 0.05, 3).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = params();
        let bytes = to_bytes(&p);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn save_load_save_identical_files() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        save(&params(), &a).unwrap();
        save(&load(&a).unwrap(), &b).unwrap();
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = to_bytes(&params());
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
    }

    #[test]
    fn missing_file_reports_path() {
        let err = load("/nonexistent/model.ckpt").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/model.ckpt"));
    }
}
