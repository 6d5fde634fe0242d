//! Parameter checkpoint files.
//!
//! Layout (all integers `u32` little-endian, values `f64` little-endian):
//!
//! ```text
//! "BSP1" | count | { name_len | name bytes | rank | dims[rank] | values } * count
//! ```

use std::io::{Read, Write};

use crate::error::{NnError, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BSP1";

pub fn write_store<W: Write>(store: &ParamStore, mut w: W) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&u32_of(store.len())?.to_le_bytes());
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        let value = store.value(id);
        buf.extend_from_slice(&u32_of(name.len())?.to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&u32_of(value.rank())?.to_le_bytes());
        for &d in value.shape() {
            buf.extend_from_slice(&u32_of(d)?.to_le_bytes());
        }
        for v in value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_store<R: Read>(mut r: R) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse_store(&bytes)
}

/// Parses checkpoint bytes. Every length is bounds-checked against the
/// remaining input before allocating.
pub fn parse_store(bytes: &[u8]) -> Result<ParamStore> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let count = cur.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| NnError::Checkpoint(format!("non-UTF-8 name at offset {}", cur.pos)))?
            .to_owned();
        let rank = cur.u32()? as usize;
        if rank > 8 {
            return Err(NnError::Checkpoint(format!("rank {rank} too large for `{name}`")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = cur.u32()? as usize;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| NnError::Checkpoint(format!("size overflow for `{name}`")))?;
            shape.push(d);
        }
        let need = numel
            .checked_mul(8)
            .ok_or_else(|| NnError::Checkpoint(format!("size overflow for `{name}`")))?;
        let raw = cur.take(need)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data)?;
        store
            .insert(name, tensor)
            .map_err(|e| NnError::Checkpoint(e.to_string()))?;
    }
    if cur.pos != bytes.len() {
        return Err(NnError::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    Ok(store)
}

fn u32_of(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| NnError::Checkpoint(format!("{n} does not fit in u32")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                NnError::Checkpoint(format!(
                    "truncated: need {n} bytes at offset {}, have {}",
                    self.pos,
                    self.bytes.len() - self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a/w", Tensor::from_rows(2, 3, (0..6).map(f64::from).collect()).unwrap())
            .unwrap();
        s.insert("b", Tensor::scalar(-1.5)).unwrap();
        s
    }

    #[test]
    fn layout_is_stable() {
        let mut buf = Vec::new();
        write_store(&sample(), &mut buf).unwrap();
        assert_eq!(&buf[..4], b"BSP1");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 2);
        // entry 1: len(3) "a/w" rank 2 dims 2,3 then 6 f64
        let e1 = 4 + 3 + 4 + 8 + 48;
        // entry 2: len(1) "b" rank 0 then 1 f64
        let e2 = 4 + 1 + 4 + 8;
        assert_eq!(buf.len(), 8 + e1 + e2);
    }

    #[test]
    fn round_trip() {
        let s = sample();
        let mut buf = Vec::new();
        write_store(&s, &mut buf).unwrap();
        let back = parse_store(&buf).unwrap();
        assert_eq!(back.len(), 2);
        for id in s.ids() {
            let j = back.require(s.name(id)).unwrap();
            assert_eq!(back.value(j), s.value(id));
        }
    }

    #[test]
    fn rejects_bad_input() {
        let mut buf = Vec::new();
        write_store(&sample(), &mut buf).unwrap();
        assert!(parse_store(b"XXXX").is_err());
        assert!(parse_store(&buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(parse_store(&extra).is_err());
        let mut huge = buf.clone();
        huge[4..8].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(parse_store(&huge).is_err());
    }
}
