//! Binary checkpoint file: a version tag, string metadata, and a flat map from
//! parameter path to `{shape, row-major f64 data}`.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "DENSECC\0"
//! version  u32
//! n_meta   u32      then n_meta × (key: str, value: str)
//! n_params u32      then n_params × (name: str, rank: u32, dims: rank × u64, data: numel × f64)
//! str      = u32 byte length + UTF-8 bytes
//! ```
//!
//! Floats are stored as raw IEEE-754 bits, so a save/load round trip is
//! bit-exact.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use thiserror::Error;

use super::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"DENSECC\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint contains invalid UTF-8")]
    Utf8,
    #[error("checkpoint does not match model: {0}")]
    Mismatch(String),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: IndexMap<String, String>,
    pub params: IndexMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore) -> Self {
        Checkpoint {
            meta: IndexMap::new(),
            params: store.iter().map(|(k, p)| (k.to_string(), p.value.clone())).collect(),
        }
    }

    /// Copies every tensor into `store`. The parameter sets and shapes must
    /// match exactly.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<(), CheckpointError> {
        if store.len() != self.params.len() {
            return Err(CheckpointError::Mismatch(format!(
                "model has {} parameters, checkpoint has {}",
                store.len(),
                self.params.len()
            )));
        }
        for (name, value) in &self.params {
            store
                .set_value(name, value.clone())
                .map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let mut meta = IndexMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            meta.insert(k, v);
        }
        let mut params = IndexMap::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_bits(r.u64()?));
            }
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
            params.insert(name, t);
        }
        Ok(Checkpoint { meta, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Utf8)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            values in proptest::collection::vec(proptest::num::f64::ANY, 1..40),
            key in "[a-z.]{1,12}",
        ) {
            let mut ck = Checkpoint::default();
            ck.meta.insert("k".into(), key.clone());
            let n = values.len();
            ck.params.insert(key, Tensor::new(vec![n], values.clone()).unwrap());
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            let got = back.params.values().next().unwrap();
            prop_assert_eq!(got.shape(), &[n]);
            for (a, b) in got.data().iter().zip(&values) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(Checkpoint::from_bytes(b"nope"), Err(CheckpointError::Truncated)));
        assert!(matches!(
            Checkpoint::from_bytes(b"NOTMAGIC\x01\0\0\0"),
            Err(CheckpointError::BadMagic)
        ));
    }
}
