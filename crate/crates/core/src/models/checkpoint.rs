//! Little-endian named-tensor container:
//!
//! ```text
//! "ATKL" | version u32 | count u32 | count x (name_len u32, name, rank u32, extents u32.., f32 data..)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ATKL";
pub const VERSION: u32 = 1;

/// Serialized parameter set: `(name, extents, row-major values)` in model order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated: wanted {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.tensors.iter().find(|(n, _, _)| n == name).map(|(_, s, d)| (s.as_slice(), d.as_slice()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, self.tensors.len())?;
        for (name, shape, data) in &self.tensors {
            if shape.iter().product::<usize>() != data.len() {
                return Err(Error::Checkpoint(format!("{name}: extents {shape:?} do not match {} values", data.len())));
            }
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, shape.len())?;
            for &e in shape {
                put_u32(&mut out, e)?;
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf, pos: 0 };
        if c.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = c.u32()?;
        if version != VERSION as usize {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = c.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = c.u32()?;
            let name = std::str::from_utf8(c.take(len)?)
                .map_err(|e| Error::Checkpoint(format!("tensor name is not UTF-8: {e}")))?
                .to_owned();
            let rank = c.u32()?;
            let shape = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or_else(|| {
                Error::Checkpoint(format!("{name}: extents {shape:?} overflow"))
            })?;
            let raw = c.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint(format!("{name}: too large")))?)?;
            let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            tensors.push((name, shape, data));
        }
        if c.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - c.pos)));
        }
        Ok(Checkpoint { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::File::create(path)?.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}
