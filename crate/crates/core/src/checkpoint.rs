//! Versioned binary container for model parameters.
//!
//! Layout (little endian):
//!
//! ```text
//! magic     8 bytes  "BCNSCKPT"
//! version   u32
//! kind      u32      1 = prior network, 2 = logistic ranker
//! n_dims    u32
//! dims      n_dims × u64
//! n_values  u64
//! values    n_values × f64 (IEEE-754 bit patterns)
//! ```
//!
//! Values are stored as raw bit patterns so a save/load cycle is bit-exact.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"BCNSCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum CheckpointKind {
    PriorNetwork = 1,
    LogisticRanker = 2,
}

impl CheckpointKind {
    fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            1 => Ok(Self::PriorNetwork),
            2 => Ok(Self::LogisticRanker),
            other => Err(Error::Load(format!("unknown checkpoint kind {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub dims: Vec<u64>,
    pub values: Vec<f64>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(28 + 8 * (self.dims.len() + self.values.len()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind as u32).to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != MAGIC {
            return Err(Error::Load("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Load(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let kind = CheckpointKind::from_tag(r.u32()?)?;
        let n_dims = r.u32()? as usize;
        let dims = (0..n_dims).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let n_values = r.u64()?;
        if n_values.saturating_mul(8) != r.remaining() as u64 {
            return Err(Error::Load(format!(
                "checkpoint declares {n_values} values but {} bytes remain",
                r.remaining()
            )));
        }
        let values = (0..n_values)
            .map(|_| r.u64().map(f64::from_bits))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { kind, dims, values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Little-endian cursor that reports truncation as a load error.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Load(format!(
                "stream truncated at byte {} (needed {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        self.u64().map(f64::from_bits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let ck = Checkpoint {
            kind: CheckpointKind::LogisticRanker,
            dims: vec![1, 3],
            values: vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300],
        };
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(back.dims, ck.dims);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.values), bits(&ck.values));
    }

    #[test]
    fn truncation_and_version_are_detected() {
        let ck = Checkpoint {
            kind: CheckpointKind::PriorNetwork,
            dims: vec![2],
            values: vec![1.0, 2.0],
        };
        let bytes = ck.encode();
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 1]), Err(Error::Load(_))));
        let mut bumped = bytes.clone();
        bumped[8] = 9;
        assert!(matches!(Checkpoint::decode(&bumped), Err(Error::Load(_))));
        assert!(Checkpoint::decode(b"nonsense").is_err());
    }
}
