//! The `GDAC` tensor container.
//!
//! ```text
//! "GDAC" | version: u32 LE
//! repeated: name_len: u32 | name: UTF-8 | rank: u32 | dims: u64 LE * rank | payload: f32 LE * prod(dims)
//! checksum: u64 LE (FNV-1a over all payload bytes, in record order)
//! ```

use std::io::{Read, Write};

use crate::error::{GdaError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GDAC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub tensor: Tensor<f32>,
}

struct Fnv1a(u64);

impl Fnv1a {
    fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
}

pub fn write_container<W: Write>(mut w: W, records: &[Record]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let mut hash = Fnv1a::new();
    for r in records {
        let name = r.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = r.tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(r.tensor.len() * 4);
        for v in r.tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        hash.update(&payload);
        w.write_all(&payload)?;
    }
    w.write_all(&hash.0.to_le_bytes())?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| GdaError::Checkpoint("truncated container".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn read_container<R: Read>(mut r: R) -> Result<Vec<Record>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(GdaError::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(GdaError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut hash = Fnv1a::new();
    let mut records = Vec::new();
    while c.remaining() > 8 {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| GdaError::Checkpoint("record name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64()? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| GdaError::Checkpoint("record too large".into()))?;
        let payload = c.take(count)?;
        hash.update(payload);
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let tensor = Tensor::new(&shape, data)
            .map_err(|e| GdaError::Checkpoint(format!("{name}: {e}")))?;
        records.push(Record { name, tensor });
    }
    if c.remaining() != 8 {
        return Err(GdaError::Checkpoint("missing checksum".into()));
    }
    if c.u64()? != hash.0 {
        return Err(GdaError::Checkpoint("checksum mismatch".into()));
    }
    Ok(records)
}
