//! Named parameter collections and the binary weight container.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes   b"RGBTVGW1"
//! count   u32       number of entries
//! entry*  count     sorted by name (byte order)
//!   name_len  u32
//!   name      name_len bytes, UTF-8
//!   rows      u32
//!   cols      u32
//!   values    rows*cols f64, row-major
//! ```
//!
//! Entries are written in sorted order, so equal maps produce equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

const MAGIC: &[u8; 8] = b"RGBTVGW1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in insertion order.
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named set of matrices. Insertion order is the iteration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        if let Some(&id) = self.index.get(&name) {
            self.values[id.0] = value;
            return id;
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    /// Looks up a parameter that the model structure guarantees exists.
    pub fn expect(&self, name: &str) -> ParamId {
        self.id(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"))
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(_, _, m)| m.len())
            .sum()
    }

    /// Serializes into the container format documented at module level.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut sorted: Vec<(&str, &Matrix)> =
            self.names.iter().map(String::as_str).zip(&self.values).collect();
        sorted.sort_by(|a, b| a.0.cmp(b.0));
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(sorted.len() as u32).to_le_bytes());
        for (name, m) in sorted {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            out.extend_from_slice(&m.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let count = r.u32()? as usize;
        let mut store = ParamStore::default();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| Error::Checkpoint(format!("entry name: {e}")))?
                .to_string();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let raw = r.take(rows * cols * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if store.id(&name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate entry `{name}`")));
            }
            store.insert(name, Matrix::from_vec(rows, cols, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Hex SHA-256 of the container bytes.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Copies values from `other` for every name present in both stores
    /// with identical shapes. Returns an error describing the first
    /// name or shape that does not line up when `strict` is set.
    pub fn load_values_from(&mut self, other: &ParamStore, strict: bool) -> Result<()> {
        if strict {
            let mine: Vec<&str> = {
                let mut v: Vec<&str> = self.names.iter().map(String::as_str).collect();
                v.sort_unstable();
                v
            };
            let theirs: Vec<&str> = {
                let mut v: Vec<&str> = other.names.iter().map(String::as_str).collect();
                v.sort_unstable();
                v
            };
            if mine != theirs {
                let missing: Vec<&&str> = mine.iter().filter(|n| !theirs.contains(n)).collect();
                let extra: Vec<&&str> = theirs.iter().filter(|n| !mine.contains(n)).collect();
                return Err(Error::Checkpoint(format!(
                    "parameter names differ from the configured model (missing {missing:?}, unexpected {extra:?})"
                )));
            }
        }
        for i in 0..self.values.len() {
            if let Some(m) = other.by_name(&self.names[i]) {
                if m.shape() != self.values[i].shape() {
                    return Err(Error::Checkpoint(format!(
                        "`{}` has shape {:?}, model expects {:?}",
                        self.names[i],
                        m.shape(),
                        self.values[i].shape()
                    )));
                }
                self.values[i] = m.clone();
            }
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated container".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// 64-bit FNV-1a. Stable across platforms and releases, unlike
/// `std::hash`.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// RNG for one named tensor. Keying by name keeps every tensor's initial
/// value independent of which other tensors a configuration creates.
pub fn named_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn container_is_order_independent() {
        let mut a = ParamStore::default();
        a.insert("b", Matrix::filled(1, 2, 1.5));
        a.insert("a", Matrix::identity(2));
        let mut b = ParamStore::default();
        b.insert("a", Matrix::identity(2));
        b.insert("b", Matrix::filled(1, 2, 1.5));
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn rejects_corrupt_containers() {
        let mut a = ParamStore::default();
        a.insert("w", Matrix::identity(3));
        let bytes = a.to_bytes();
        assert!(ParamStore::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(ParamStore::from_bytes(b"NOTMAGIC\0\0\0\0").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(ParamStore::from_bytes(&extra).is_err());
    }

    #[test]
    fn strict_load_reports_name_mismatch() {
        let mut a = ParamStore::default();
        a.insert("w", Matrix::zeros(2, 2));
        let mut b = ParamStore::default();
        b.insert("v", Matrix::zeros(2, 2));
        assert!(a.load_values_from(&b, true).is_err());
        let mut c = ParamStore::default();
        c.insert("w", Matrix::zeros(3, 2));
        assert!(a.load_values_from(&c, false).is_err());
    }

    proptest! {
        #[test]
        fn container_roundtrip(values in proptest::collection::vec(
            (1usize..4, 1usize..4, -1e6f64..1e6), 1..6)) {
            let mut store = ParamStore::default();
            for (i, (r, c, v)) in values.iter().enumerate() {
                store.insert(format!("p{i}"), Matrix::filled(*r, *c, *v));
            }
            let back = ParamStore::from_bytes(&store.to_bytes()).unwrap();
            prop_assert_eq!(back.to_bytes(), store.to_bytes());
            for (_, name, m) in store.iter() {
                prop_assert_eq!(back.by_name(name).unwrap(), m);
            }
        }
    }
}
