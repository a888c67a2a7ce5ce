//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FATL"            magic
//! u32               format version
//! u32               entry count
//! per entry:        u32 name length, name bytes (UTF-8),
//!                   u32 rank, u64 dims[rank],
//!                   u64 payload byte offset
//! payload:          f64 values of every entry, in entry order
//! ```

use std::fs;
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FATL";
pub const VERSION: u32 = 1;

pub fn encode(entries: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut head = Vec::new();
    head.extend_from_slice(MAGIC);
    head.extend_from_slice(&VERSION.to_le_bytes());
    head.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in entries {
        head.extend_from_slice(&(name.len() as u32).to_le_bytes());
        head.extend_from_slice(name.as_bytes());
        head.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            head.extend_from_slice(&(d as u64).to_le_bytes());
        }
        head.extend_from_slice(&offset.to_le_bytes());
        offset += 8 * t.numel() as u64;
    }
    head.reserve(offset as usize);
    for (_, t) in entries {
        for v in t.data() {
            head.extend_from_slice(&v.to_le_bytes());
        }
    }
    head
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let count = r.u32()? as usize;
    let mut heads = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let offset = r.u64()? as usize;
        heads.push((name, shape, offset));
    }
    let payload = &buf[r.pos..];
    heads
        .into_iter()
        .map(|(name, shape, offset)| {
            let n: usize = shape.iter().product();
            let bytes = payload
                .get(offset..offset + 8 * n)
                .ok_or_else(|| Error::Checkpoint(format!("payload for `{name}` is truncated")))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Ok((name, Tensor::new(shape, data)?))
        })
        .collect()
}

pub fn encode_params(store: &ParamStore) -> Vec<u8> {
    let entries: Vec<(&str, &Tensor)> = store.iter().map(|(_, p)| (p.name.as_str(), &p.value)).collect();
    encode(&entries)
}

pub fn save_params(store: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, encode_params(store)).map_err(|e| Error::io(path, e))
}

pub fn load_params(store: &mut ParamStore, path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    store.load_values(decode(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_stable() {
        let t = Tensor::vector(vec![1.5]);
        let bytes = encode(&[("a", &t)]);
        let mut expect = b"FATL".to_vec();
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(b"a");
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1u64.to_le_bytes());
        expect.extend_from_slice(&0u64.to_le_bytes());
        expect.extend_from_slice(&1.5f64.to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn round_trip_and_errors() {
        let a = Tensor::new(vec![2, 3], (0..6).map(|v| v as f64 * 0.1).collect()).unwrap();
        let b = Tensor::scalar(-7.25);
        let bytes = encode(&[("w", &a), ("bias", &b)]);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, vec![("w".to_string(), a), ("bias".to_string(), b)]);
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
    }
}
