//! Binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "CLUDACK1"
//! manifest     u64 length + UTF-8 JSON
//! array count  u64
//! per array    u32 name length + UTF-8 name
//!              u32 rank + rank × u64 dims
//!              product(dims) × f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CLUDACK1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Free-form JSON describing how the arrays were produced.
    pub manifest: serde_json::Value,
    pub arrays: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        let manifest = serde_json::to_vec(&self.manifest)?;
        w.write_all(&(manifest.len() as u64).to_le_bytes())?;
        w.write_all(&manifest)?;
        w.write_all(&(self.arrays.len() as u64).to_le_bytes())?;
        for (name, t) in &self.arrays {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.ndim() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let len = read_u64(r)? as usize;
        let manifest: serde_json::Value = serde_json::from_slice(&read_bytes(r, len)?)?;
        let count = read_u64(r)?;
        let mut arrays = Vec::new();
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let name = String::from_utf8(read_bytes(r, name_len)?)
                .map_err(|_| Error::Format("array name is not UTF-8".into()))?;
            let rank = read_u32(r)? as usize;
            let shape = (0..rank)
                .map(|_| read_u64(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = read_bytes(r, n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            arrays.push((name, Tensor::new(shape, data)?));
        }
        Ok(Checkpoint { manifest, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Checkpoint::read_from(&mut bytes.as_slice())
    }
}

fn read_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(Error::Format("truncated checkpoint".into()));
    }
    Ok(buf)
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("truncated checkpoint".into()))?;
    Ok(u64::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("truncated checkpoint".into()))?;
    Ok(u32::from_le_bytes(b))
}
