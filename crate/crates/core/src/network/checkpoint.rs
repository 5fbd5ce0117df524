//! Checkpoint container.
//!
//! Layout (integers little-endian `u32`):
//!
//! ```text
//! "SGMCCKPT" | version | sha256(config text) [32 bytes]
//! config length | config text (TOML)
//! state length  | state text (key=value lines)
//! tensor count  | per tensor: name length, name, rank, dims..., f32 values
//! ```
//!
//! Loading recomputes the digest of the embedded config text and rejects the
//! file on mismatch.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"SGMCCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn config_digest(config_text: &str) -> [u8; 32] {
    Sha256::digest(config_text.as_bytes()).into()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub state_text: String,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(self.pos as u64, format!("truncated while reading {what}")));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("four bytes")) as usize)
    }

    fn text(&mut self, what: &str) -> Result<String> {
        let at = self.pos;
        let n = self.u32(what)?;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::format(at as u64, format!("{what} is not UTF-8")))
    }
}

impl Checkpoint {
    pub fn digest(&self) -> [u8; 32] {
        config_digest(&self.config_text)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest());
        for text in [&self.config_text, &self.state_text] {
            put_u32(&mut out, text.len());
            out.extend_from_slice(text.as_bytes());
        }
        put_u32(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::format(
                0,
                format!("bad magic {:?}, expected \"SGMCCKPT\"", String::from_utf8_lossy(magic)),
            ));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION as usize {
            return Err(Error::format(8, format!("unsupported checkpoint version {version}")));
        }
        let digest: [u8; 32] = r.take(32, "config digest")?.try_into().expect("32 bytes");
        let config_text = r.text("config text")?;
        if config_digest(&config_text) != digest {
            return Err(Error::format(12, "config digest does not match the embedded config"));
        }
        let state_text = r.text("state text")?;
        let count = r.u32("tensor count")?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let at = r.pos;
            let name = r.text("tensor name")?;
            let rank = r.u32("tensor rank")?;
            let shape = (0..rank).map(|_| r.u32("tensor shape")).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let bytes = len
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::format(at as u64, format!("tensor {name:?} shape {shape:?} overflows")))?;
            let payload = r.take(bytes, "tensor payload")?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::format(at as u64, format!("tensor {name:?}: {e}")))?;
            tensors.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos as u64, "trailing bytes after the last tensor"));
        }
        Ok(Self {
            config_text,
            state_text,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Reads a checkpoint and checks it was written for `config_text`.
    pub fn read_expecting(path: &Path, config_text: &str) -> Result<Self> {
        let ckpt = Self::read(path)?;
        if ckpt.digest() != config_digest(config_text) {
            return Err(Error::config(format!(
                "{} was written for a different model configuration",
                path.display()
            )));
        }
        Ok(ckpt)
    }

    /// `key=value` pairs from the state text.
    pub fn state(&self) -> BTreeMap<String, String> {
        self.state_text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut tensors = BTreeMap::new();
        tensors.insert("a".to_string(), Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.5, 0.0]).unwrap());
        tensors.insert("b.c".to_string(), Tensor::scalar(7.0));
        Checkpoint {
            config_text: "x = 1\n".into(),
            state_text: "epoch=3\n".into(),
            tensors,
        }
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let c = sample();
        let bytes = c.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.encode(), bytes);
        assert_eq!(back.state()["epoch"], "3");
    }

    #[test]
    fn tampered_config_fails_digest() {
        let mut bytes = sample().encode();
        let pos = 8 + 4 + 32 + 4;
        bytes[pos] = b'y';
        let err = Checkpoint::decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("digest"));
    }

    #[test]
    fn truncation_and_magic_detected() {
        let bytes = sample().encode();
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(Checkpoint::decode(&bad).unwrap_err().to_string().contains("SGMCCKPT"));
    }
}
