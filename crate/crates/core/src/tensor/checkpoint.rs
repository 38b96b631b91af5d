//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"HTRCKPT\0"
//! u32     format version
//! u32     metadata entry count, then per entry: u32 len + UTF-8 key, u32 len + UTF-8 value
//! u32     tensor count, then per tensor:
//!         u32 len + UTF-8 share id, u8 kind (0 parameter, 1 buffer),
//!         u32 rank, rank × u64 extents, product(extents) × f64
//! ```
//!
//! Entries are written in sorted order, so encoding is canonical and a
//! decode/encode cycle reproduces the input bytes.

use std::collections::BTreeMap;
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"HTRCKPT\0";
const MAX_RANK: usize = 8;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub params: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore) -> Self {
        let params = store
            .params()
            .iter()
            .map(|p| (p.id(), p.value().clone()))
            .collect();
        let buffers = store
            .buffers()
            .map(|(id, b)| (id.to_string(), b.get().clone()))
            .collect();
        Self {
            meta: BTreeMap::new(),
            params,
            buffers,
        }
    }

    /// Copies stored values into `store`. Every entry of the store must be
    /// present with a matching shape.
    pub fn apply_to(&self, store: &ParamStore) -> Result<()> {
        for p in store.params() {
            let id = p.id();
            let t = self
                .params
                .get(&id)
                .ok_or_else(|| Error::format("checkpoint", format!("missing parameter {id:?}")))?;
            p.set_value(t.clone())?;
        }
        for (id, b) in store.buffers() {
            let t = self
                .buffers
                .get(id)
                .ok_or_else(|| Error::format("checkpoint", format!("missing buffer {id:?}")))?;
            let mut dst = b.get_mut();
            if dst.shape() != t.shape() {
                return Err(Error::shape("checkpoint buffer", dst.shape(), t.shape()));
            }
            *dst = t.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        let count = self.params.len() + self.buffers.len();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for (kind, map) in [(0u8, &self.params), (1u8, &self.buffers)] {
            for (id, t) in map {
                put_str(&mut out, id);
                out.push(kind);
                out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for &v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                "checkpoint",
                format!("unsupported version {version} (expected {CHECKPOINT_VERSION})"),
            ));
        }
        let mut ck = Checkpoint::default();
        let n_meta = r.u32()?;
        for _ in 0..n_meta {
            let k = r.string()?;
            let v = r.string()?;
            if ck.meta.insert(k.clone(), v).is_some() {
                return Err(Error::format(
                    "checkpoint",
                    format!("duplicate metadata key {k:?}"),
                ));
            }
        }
        let n_tensors = r.u32()?;
        for _ in 0..n_tensors {
            let id = r.string()?;
            let kind = r.take(1)?[0];
            let rank = r.u32()? as usize;
            if rank == 0 || rank > MAX_RANK {
                return Err(Error::format(
                    "checkpoint",
                    format!("tensor {id:?} has rank {rank}"),
                ));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut count: usize = 1;
            for _ in 0..rank {
                let d = usize::try_from(r.u64()?)
                    .map_err(|_| Error::format("checkpoint", "extent overflows usize"))?;
                count = count
                    .checked_mul(d)
                    .ok_or_else(|| Error::format("checkpoint", "element count overflows"))?;
                shape.push(d);
            }
            let nbytes = count
                .checked_mul(8)
                .ok_or_else(|| Error::format("checkpoint", "element count overflows"))?;
            let raw = r.take(nbytes)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            let t =
                Tensor::new(shape, data).map_err(|e| Error::format("checkpoint", e.to_string()))?;
            let map = match kind {
                0 => &mut ck.params,
                1 => &mut ck.buffers,
                k => {
                    return Err(Error::format(
                        "checkpoint",
                        format!("unknown entry kind {k}"),
                    ))
                }
            };
            if map.insert(id.clone(), t).is_some() {
                return Err(Error::format(
                    "checkpoint",
                    format!("duplicate entry {id:?}"),
                ));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::format(
                "checkpoint",
                "trailing bytes after last entry",
            ));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format("checkpoint", "truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
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

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::format("checkpoint", "string is not UTF-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.meta.insert("vocab".into(), "abc".into());
        ck.params.insert(
            "conv0.w".into(),
            Tensor::from_slice(&[2, 1, 1, 2], &[1.5, -0.0, f64::MIN_POSITIVE, 3e300]),
        );
        ck.buffers
            .insert("bn.mean".into(), Tensor::from_slice(&[2], &[0.25, -7.0]));
        ck
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(
            back.params["conv0.w"].data()[1].to_bits(),
            (-0.0f64).to_bits()
        );
    }

    #[test]
    fn rejects_version_and_truncation() {
        let mut bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[8] = 9;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn rejects_huge_extents_without_allocating() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        put_str(&mut bytes, "w");
        bytes.push(0);
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
