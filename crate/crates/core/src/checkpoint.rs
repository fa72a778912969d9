//! Binary checkpoint bundle.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"ATTNCKPT"  u32 version
//! u32 len, config block   (UTF-8 `key=value` lines)
//! u32 len, vocab block    (UTF-8, one token per line)
//! u32 tensor count
//! per tensor: u32 len, name; u32 rank; rank × u64 dims; f64 data
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::tokenizer::Vocab;

pub const MAGIC: &[u8; 8] = b"ATTNCKPT";
pub const VERSION: u32 = 1;

pub fn to_bytes(model: &Model, vocab: &Vocab) -> Vec<u8> {
    let c = &model.config;
    let config = format!(
        "layers={}\nheads={}\nd_model={}\nd_ff={}\nmax_len={}\nvocab_size={}\nseed={}\n",
        c.layers, c.heads, c.d_model, c.d_ff, c.max_len, c.vocab_size, c.seed
    );
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_block(&mut out, config.as_bytes());
    put_block(&mut out, vocab.to_text().as_bytes());
    let named = model.named();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        put_block(&mut out, name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn put_block(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Checkpoint {
            offset: self.pos as u64,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn text(&mut self, what: &str) -> Result<&'a str> {
        let n = self.u32(what)? as usize;
        let start = self.pos;
        let raw = self.take(n, what)?;
        std::str::from_utf8(raw).map_err(|_| Error::Checkpoint {
            offset: start as u64,
            detail: format!("{what} is not UTF-8"),
        })
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Model, Vocab)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.fail("magic mismatch: not a checkpoint"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        r.pos -= 4;
        return Err(r.fail(format!("unsupported version {version}, expected {VERSION}")));
    }
    let config_at = r.pos;
    let config = parse_config(r.text("config block")?).map_err(|detail| Error::Checkpoint {
        offset: config_at as u64,
        detail,
    })?;
    let vocab_at = r.pos;
    let vocab = Vocab::from_text(r.text("vocab block")?).map_err(|e| Error::Checkpoint {
        offset: vocab_at as u64,
        detail: e.to_string(),
    })?;
    if vocab.len() != config.vocab_size {
        return Err(Error::Checkpoint {
            offset: vocab_at as u64,
            detail: format!("vocab has {} tokens, config says {}", vocab.len(), config.vocab_size),
        });
    }
    let layout = config.layout();
    let count = r.u32("tensor count")? as usize;
    if count != layout.len() {
        r.pos -= 4;
        return Err(r.fail(format!("{count} tensors, layout needs {}", layout.len())));
    }
    let mut params = Vec::with_capacity(count);
    for (want, want_shape) in &layout {
        let at = r.pos;
        let name = r.text("tensor name")?;
        if name != want {
            r.pos = at;
            return Err(r.fail(format!("tensor {name:?} where {want:?} was expected")));
        }
        let rank = r.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("tensor dims")? as usize);
        }
        if &shape != want_shape {
            r.pos = at;
            return Err(r.fail(format!("tensor {name} has shape {shape:?}, expected {want_shape:?}")));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(8 * n, "tensor data")?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        params.push(Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes after last tensor"));
    }
    Ok((Model::from_params(config, params)?, vocab))
}

fn parse_config(text: &str) -> std::result::Result<ModelConfig, String> {
    let mut c = ModelConfig {
        layers: 0,
        heads: 0,
        d_model: 0,
        d_ff: 0,
        max_len: 0,
        vocab_size: 0,
        seed: 0,
    };
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| format!("bad config line {line:?}"))?;
        let n: u64 = v.parse().map_err(|_| format!("bad value in {line:?}"))?;
        match k {
            "layers" => c.layers = n as usize,
            "heads" => c.heads = n as usize,
            "d_model" => c.d_model = n as usize,
            "d_ff" => c.d_ff = n as usize,
            "max_len" => c.max_len = n as usize,
            "vocab_size" => c.vocab_size = n as usize,
            "seed" => c.seed = n,
            other => return Err(format!("unknown config key {other:?}")),
        }
    }
    c.validate().map_err(|e| e.to_string())?;
    Ok(c)
}

pub fn save(path: &Path, model: &Model, vocab: &Vocab) -> Result<()> {
    std::fs::write(path, to_bytes(model, vocab)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Model, Vocab)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (Model, Vocab) {
        let vocab = Vocab::from_tokens(["a", "b", "c"].map(String::from)).unwrap();
        let cfg = ModelConfig {
            layers: 1,
            heads: 2,
            d_model: 4,
            d_ff: 8,
            max_len: 6,
            vocab_size: vocab.len(),
            seed: 1,
        };
        (Model::init(cfg).unwrap(), vocab)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (m, v) = sample();
        let (m2, v2) = from_bytes(&to_bytes(&m, &v)).unwrap();
        assert_eq!(v, v2);
        for (a, b) in m.params().iter().zip(m2.params()) {
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn corrupt_magic_and_truncation() {
        let (m, v) = sample();
        let mut bytes = to_bytes(&m, &v);
        let cut = bytes.len() - 3;
        let err = from_bytes(&bytes[..cut]).unwrap_err();
        assert!(matches!(err, Error::Checkpoint { offset, .. } if offset > 0 && offset < cut as u64), "{err}");
        bytes[2] ^= 0xff;
        assert!(from_bytes(&bytes).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn version_mismatch() {
        let (m, v) = sample();
        let mut bytes = to_bytes(&m, &v);
        bytes[8] = 9;
        assert!(from_bytes(&bytes).unwrap_err().to_string().contains("version"));
    }
}
