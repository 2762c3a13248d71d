//! Versioned binary parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  b"GLYPHCKP"
//! u32    format version (1)
//! u32    entry count
//! entry* u32 name length, name bytes (UTF-8),
//!        u8 dtype (0 = f64, 1 = UTF-8 text),
//!        u32 rank, u64 × rank dims,
//!        payload (f64 LE values, or raw bytes for text)
//! ```
//!
//! Text entries carry metadata under names starting with `meta.`; tensors
//! carry parameter values under their dotted module paths. Entries are
//! written in name order, so equal contents give equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use super::nn::Module;
use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"GLYPHCKP";
pub const VERSION: u32 = 1;

const DTYPE_F64: u8 = 0;
const DTYPE_TEXT: u8 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
    pub meta: BTreeMap<String, String>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

impl Checkpoint {
    pub fn from_module(m: &dyn Module) -> Self {
        Self {
            tensors: m.state().into_iter().collect(),
            meta: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata entry `meta.{key}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend(VERSION.to_le_bytes());
        out.extend(((self.meta.len() + self.tensors.len()) as u32).to_le_bytes());
        let write_header = |out: &mut Vec<u8>, name: &str, dtype: u8, dims: &[usize]| {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.push(dtype);
            out.extend((dims.len() as u32).to_le_bytes());
            for &d in dims {
                out.extend((d as u64).to_le_bytes());
            }
        };
        // "meta." sorts before parameter paths only by convention, so the two
        // maps are written as separate runs.
        for (k, v) in &self.meta {
            write_header(&mut out, &format!("meta.{k}"), DTYPE_TEXT, &[v.len()]);
            out.extend(v.as_bytes());
        }
        for (name, t) in &self.tensors {
            write_header(&mut out, name, DTYPE_F64, t.shape());
            for v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
            return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} unsupported (expected {VERSION})"
            )));
        }
        let count = r.u32()?;
        let mut ckpt = Checkpoint::default();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
                .to_string();
            let dtype = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("entry `{name}` dims overflow")))?;
            match dtype {
                DTYPE_TEXT => {
                    let key = name.strip_prefix("meta.").ok_or_else(|| {
                        Error::Checkpoint(format!("text entry `{name}` outside meta namespace"))
                    })?;
                    let text = std::str::from_utf8(r.take(numel)?)
                        .map_err(|_| Error::Checkpoint(format!("entry `{name}` is not UTF-8")))?;
                    ckpt.meta.insert(key.to_string(), text.to_string());
                }
                DTYPE_F64 => {
                    let nbytes = numel
                        .checked_mul(8)
                        .ok_or_else(|| Error::Checkpoint(format!("entry `{name}` too large")))?;
                    let raw = r.take(nbytes)?;
                    let data = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    ckpt.tensors.insert(name, Tensor::new(&dims, data)?);
                }
                other => {
                    return Err(Error::Checkpoint(format!(
                        "entry `{name}` has unknown dtype tag {other}"
                    )))
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copies stored values into `m`. The entry set must match the module's
    /// parameter names exactly, with equal shapes.
    pub fn load_into(&self, m: &mut dyn Module) -> Result<()> {
        let expected = m.param_names();
        let missing: Vec<&str> = expected
            .iter()
            .filter(|n| !self.tensors.contains_key(*n))
            .map(String::as_str)
            .collect();
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!(
                "missing entries: {}",
                missing.join(", ")
            )));
        }
        let unexpected: Vec<&str> = self
            .tensors
            .keys()
            .filter(|k| !expected.contains(k))
            .map(String::as_str)
            .collect();
        if !unexpected.is_empty() {
            return Err(Error::Checkpoint(format!(
                "unexpected entries: {}",
                unexpected.join(", ")
            )));
        }
        let mut result = Ok(());
        m.visit_mut("", &mut |name, p| {
            let t = &self.tensors[name];
            if t.shape() != p.value.shape() {
                if result.is_ok() {
                    result = Err(Error::Checkpoint(format!(
                        "entry `{name}` has shape {:?}, expected {:?}",
                        t.shape(),
                        p.value.shape()
                    )));
                }
                return;
            }
            p.value = t.clone();
            p.grad = None;
        });
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Linear;

    fn sample() -> Checkpoint {
        let mut rng = crate::rng::stream(3, "ckpt");
        Checkpoint::from_module(&Linear::new(3, 2, true, &mut rng)).with_meta("kind", "test")
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes)
            .unwrap_err()
            .to_string()
            .contains("magic"));
        let mut bytes = sample().to_bytes();
        bytes[8] = 9;
        assert!(Checkpoint::from_bytes(&bytes)
            .unwrap_err()
            .to_string()
            .contains("version"));
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn load_into_audits_names_and_shapes() {
        let mut rng = crate::rng::stream(4, "ckpt");
        let c = sample();
        let mut same = Linear::new(3, 2, true, &mut rng);
        c.load_into(&mut same).unwrap();
        assert_eq!(same.weight.value, c.tensors["weight"]);

        let mut no_bias = Linear::new(3, 2, false, &mut rng);
        assert!(c
            .load_into(&mut no_bias)
            .unwrap_err()
            .to_string()
            .contains("unexpected"));
        let mut wider = Linear::new(4, 2, true, &mut rng);
        assert!(c
            .load_into(&mut wider)
            .unwrap_err()
            .to_string()
            .contains("shape"));
    }
}
