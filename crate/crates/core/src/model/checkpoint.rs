//! Binary checkpoint format.
//!
//! ```text
//! "MRAI2\0"                      6 bytes
//! version                        u32 LE (= 1)
//! config length                  u64 LE
//! config                         UTF-8 JSON text
//! tensor count                   u32 LE
//! per tensor:
//!   name length                  u16 LE
//!   name                         UTF-8 bytes
//!   ndim                         u8
//!   dims                         ndim × u64 LE
//!   payload                      row-major f32 LE
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 6] = b"MRAI2\0";
pub const VERSION: u32 = 1;

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(model.config())?;
    let mut out = Vec::with_capacity(64 + config.len() + 4 * model.parameter_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.names().iter().zip(model.params()) {
        let name_len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        let ndim = u8::try_from(t.ndim()).map_err(|_| Error::Checkpoint(format!("too many dims in {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(ndim);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
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
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Model> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(r.array()?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let config_len = u64::from_le_bytes(r.array()?) as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(config_len)?)?;
    let count = u32::from_le_bytes(r.array()?) as usize;
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.array()?) as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(r.array()?) as usize);
        }
        let numel: usize = shape.iter().product();
        let bytes = r.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        named.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Model::from_named(config, named)
}

/// Writes atomically through a sibling temporary file.
pub fn save(model: &Model, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
