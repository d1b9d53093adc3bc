//! Single-file checkpoint container.
//!
//! Layout (little endian): the magic `GLEADCKPT`, a `u32` format version,
//! the `u32`-length-prefixed config text, a `u32` count of named `f32`
//! blobs (`u32` name length, name, `u32` rank, `u32` dims, values), a `u32`
//! count of named byte blobs (`u32` name length, name, `u64` length, bytes),
//! and a trailing CRC-32 of everything before it.

use std::collections::BTreeMap;
use std::path::Path;

use crate::autograd::{Float, Tensor};
use crate::error::{GleadError, Result};

pub const MAGIC: &[u8; 9] = b"GLEADCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: BTreeMap<String, Tensor<f32>>,
    pub bytes: BTreeMap<String, Vec<u8>>,
}

fn put_u32(b: &mut Vec<u8>, v: usize) {
    b.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_name(b: &mut Vec<u8>, s: &str) {
    put_u32(b, s.len());
    b.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| GleadError::Format("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")) as usize)
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| GleadError::Format("blob name is not UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn put_tensor<T: Float>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.insert(name.into(), t.cast());
    }

    pub fn tensor<T: Float>(&self, name: &str) -> Result<Tensor<T>> {
        self.tensors
            .get(name)
            .map(|t| t.cast())
            .ok_or_else(|| GleadError::Format(format!("checkpoint lacks tensor {name:?}")))
    }

    pub fn put_u64(&mut self, name: impl Into<String>, v: u64) {
        self.bytes.insert(name.into(), v.to_le_bytes().to_vec());
    }

    pub fn get_bytes(&self, name: &str) -> Result<&[u8]> {
        self.bytes
            .get(name)
            .map(|b| b.as_slice())
            .ok_or_else(|| GleadError::Format(format!("checkpoint lacks entry {name:?}")))
    }

    pub fn get_u64(&self, name: &str) -> Result<u64> {
        let b = self.get_bytes(name)?;
        let arr: [u8; 8] = b.try_into().map_err(|_| GleadError::Format(format!("entry {name:?} is not a u64")))?;
        Ok(u64::from_le_bytes(arr))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        put_name(&mut b, &self.config);
        put_u32(&mut b, self.tensors.len());
        for (name, t) in &self.tensors {
            put_name(&mut b, name);
            put_u32(&mut b, t.rank());
            for &d in t.shape() {
                put_u32(&mut b, d);
            }
            for v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        put_u32(&mut b, self.bytes.len());
        for (name, v) in &self.bytes {
            put_name(&mut b, name);
            b.extend_from_slice(&(v.len() as u64).to_le_bytes());
            b.extend_from_slice(v);
        }
        let crc = crc32fast::hash(&b);
        b.extend_from_slice(&crc.to_le_bytes());
        b
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < MAGIC.len() + 8 || &buf[..MAGIC.len()] != MAGIC {
            return Err(GleadError::Format("not a checkpoint (bad magic)".into()));
        }
        let (body, tail) = buf.split_at(buf.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let version = r.u32()? as u32;
        if version != VERSION {
            return Err(GleadError::Format(format!("checkpoint version {version}, this build reads {VERSION}")));
        }
        if crc32fast::hash(body) != stored {
            return Err(GleadError::Format("checkpoint integrity check failed (CRC mismatch)".into()));
        }
        let config = r.name()?;
        let mut ck = Checkpoint { config, ..Default::default() };
        for _ in 0..r.u32()? {
            let name = r.name()?;
            let rank = r.u32()?;
            let shape: Vec<usize> = (0..rank).map(|_| r.u32()).collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| GleadError::Format("tensor too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            ck.tensors.insert(name, Tensor::new(shape, data));
        }
        for _ in 0..r.u32()? {
            let name = r.name()?;
            let n = r.u64()?;
            ck.bytes.insert(name, r.take(n)?.to_vec());
        }
        if r.pos != body.len() {
            return Err(GleadError::Format("trailing bytes after checkpoint entries".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| GleadError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| GleadError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| GleadError::io(path, e))?;
        Self::from_bytes(&buf)
    }
}
