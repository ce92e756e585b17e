//! Named tensor collections and their flat binary file format.
//!
//! ```text
//! "SWDF"  u32 version  [u8; 4] section tag
//! repeated until EOF:
//!   u32 name length, name bytes (UTF-8), u32 rank, rank × u64 dims,
//!   product(dims) × f64 payload
//! ```
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Fnv, Tensor};

pub const MAGIC: &[u8; 4] = b"SWDF";
pub const VERSION: u32 = 1;
pub const BASE_TAG: [u8; 4] = *b"BASE";
pub const LORA_TAG: [u8; 4] = *b"LORA";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Order-stable hash of every name, shape and value bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::default();
        for (name, t) in &self.tensors {
            h.write(name.as_bytes());
            h.write(&t.fingerprint().to_le_bytes());
        }
        h.finish()
    }

    pub fn to_bytes(&self, tag: [u8; 4]) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.num_values() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&tag);
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], tag: [u8; 4]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let found = r.take(4)?;
        if found != tag {
            return Err(Error::Format(format!(
                "section tag {:?}, expected {:?}",
                String::from_utf8_lossy(found),
                String::from_utf8_lossy(&tag)
            )));
        }
        let mut store = ParamStore::new();
        while r.pos < bytes.len() {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&l| l <= bytes.len() / 8 + 1)
                .ok_or_else(|| Error::Format(format!("implausible shape {shape:?} for {name}")))?;
            let payload = r.take(len * 8)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
            if store.tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Format(format!("duplicate tensor {name}")));
            }
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path, tag: [u8; 4]) -> Result<()> {
        std::fs::write(path, self.to_bytes(tag))?;
        Ok(())
    }

    pub fn load(path: &Path, tag: [u8; 4]) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, tag)
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
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn sample_store() -> ParamStore {
        let mut rng = Rng::new(3);
        let mut s = ParamStore::new();
        s.insert("a.w", rng.normal_tensor(&[3, 4]));
        s.insert("b", Tensor::new(&[1], vec![f64::MIN_POSITIVE]).unwrap());
        s.insert("c.conv", rng.normal_tensor(&[2, 3, 3, 3]));
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample_store();
        let bytes = s.to_bytes(BASE_TAG);
        let back = ParamStore::from_bytes(&bytes, BASE_TAG).unwrap();
        assert_eq!(back.checksum(), s.checksum());
        for ((na, ta), (nb, tb)) in s.iter().zip(back.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            assert!(ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back.to_bytes(BASE_TAG), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = sample_store().to_bytes(LORA_TAG);
        assert_eq!(&bytes[..4], b"SWDF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(&bytes[8..12], b"LORA");
        // First record: "a.w", rank 2, dims 3 and 4.
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(&bytes[16..19], b"a.w");
        assert_eq!(u32::from_le_bytes(bytes[19..23].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[23..31].try_into().unwrap()), 3);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample_store().to_bytes(BASE_TAG);
        assert!(matches!(ParamStore::from_bytes(&bytes, LORA_TAG), Err(Error::Format(_))));
        assert!(ParamStore::from_bytes(&bytes[..bytes.len() - 3], BASE_TAG).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ParamStore::from_bytes(&bad, BASE_TAG).is_err());
        let mut bad = bytes;
        bad[4] = 9;
        assert!(ParamStore::from_bytes(&bad, BASE_TAG).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.swdf");
        let s = sample_store();
        s.save(&path, BASE_TAG).unwrap();
        assert_eq!(ParamStore::load(&path, BASE_TAG).unwrap(), s);
    }
}
