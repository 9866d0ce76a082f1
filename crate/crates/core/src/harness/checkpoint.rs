//! Binary checkpoint format.
//!
//! ```text
//! "OTKR" | version u32 | entry count u32 | entries sorted by name | crc32 u32
//! entry = name len u32 | name utf-8 | dtype u8 (0 = f32, 1 = f64)
//!       | rank u32 | dims u32 × rank | little-endian payload
//! ```
//! Integers are little-endian. The CRC-32 covers every preceding byte.
//! A delta checkpoint holds only trainable parameters plus a
//! [`FOUNDATION_HASH_KEY`] entry binding it to its foundation file.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"OTKR";
pub const VERSION: u32 = 1;
/// Entry holding the SHA-256 of the foundation checkpoint file as 32
/// byte values in an f32 vector.
pub const FOUNDATION_HASH_KEY: &str = "meta.foundation_sha256";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub dtype: DType,
    /// Values as stored; f32 entries hold f32-representable values.
    pub tensor: Tensor,
}

/// Name-sorted parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: BTreeMap<String, Entry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor, rounding to f32 when requested.
    pub fn insert(&mut self, name: impl Into<String>, tensor: &Tensor, dtype: DType) {
        let tensor = match dtype {
            DType::F64 => tensor.clone(),
            DType::F32 => tensor.map(|v| v as f32 as f64),
        };
        self.entries.insert(name.into(), Entry { dtype, tensor });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Every parameter of `store` selected by `keep`.
    pub fn from_store(store: &ParamStore, dtype: DType, keep: impl Fn(&str, bool) -> bool) -> Self {
        let mut c = Self::new();
        for (_, p) in store.iter() {
            if keep(&p.name, p.frozen) {
                c.insert(p.name.clone(), &p.value, dtype);
            }
        }
        c
    }

    /// Exact byte length of [`Checkpoint::encode`].
    pub fn encoded_len(&self) -> usize {
        let entries: usize = self
            .entries
            .iter()
            .map(|(name, e)| 4 + name.len() + 1 + 4 + 4 * e.tensor.rank() + e.tensor.numel() * e.dtype.width())
            .sum();
        4 + 4 + 4 + entries + 4
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(e.dtype.tag());
            out.extend_from_slice(&(e.tensor.rank() as u32).to_le_bytes());
            for &d in e.tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in e.tensor.data() {
                match e.dtype {
                    DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 16 {
            return Err(bad(format!("{} bytes is too short", bytes.len())));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(bad(format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}")));
        }
        let mut r = Reader { bytes: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("bad magic (expected OTKR)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = BTreeMap::new();
        let mut last: Option<String> = None;
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| bad("entry name is not UTF-8".into()))?;
            if last.as_ref().is_some_and(|l| *l >= name) {
                return Err(bad(format!("entry {name:?} is out of order or duplicated")));
            }
            let dtype = match r.take(1)?[0] {
                0 => DType::F32,
                1 => DType::F64,
                t => return Err(bad(format!("entry {name:?}: unknown dtype tag {t}"))),
            };
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * dtype.width())?;
            let data: Vec<f64> = match dtype {
                DType::F32 => {
                    raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64).collect()
                }
                DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect(),
            };
            let tensor = Tensor::new(shape, data).map_err(|e| bad(format!("entry {name:?}: {e}")))?;
            last = Some(name.clone());
            entries.insert(name, Entry { dtype, tensor });
        }
        if r.pos != body.len() {
            return Err(bad(format!("{} trailing bytes after the last entry", body.len() - r.pos)));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<Vec<u8>> {
        let bytes = self.encode();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    /// Copies every entry into the same-named parameter of `store`. Shapes
    /// must match; unknown names are errors. Returns the number of
    /// parameters written.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<usize> {
        let mut n = 0;
        for (name, e) in &self.entries {
            if name.starts_with("meta.") {
                continue;
            }
            let id = store
                .id_of(name)
                .ok_or_else(|| Error::Checkpoint(format!("entry {name:?} matches no model parameter")))?;
            store.set(id, e.tensor.clone()).map_err(|err| Error::Checkpoint(format!("entry {name:?}: {err}")))?;
            n += 1;
        }
        Ok(n)
    }

    pub fn set_foundation_hash(&mut self, digest: &[u8; 32]) {
        let t = Tensor::vector(digest.iter().map(|&b| b as f64).collect());
        self.insert(FOUNDATION_HASH_KEY, &t, DType::F32);
    }

    pub fn foundation_hash(&self) -> Option<String> {
        let t = self.get(FOUNDATION_HASH_KEY)?;
        let bytes: Vec<u8> = t.data().iter().map(|&v| v as u8).collect();
        Some(hex::encode(bytes))
    }
}

/// SHA-256 of checkpoint bytes, as raw digest.
pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
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
            .ok_or_else(|| Error::Checkpoint(format!("truncated: need {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
