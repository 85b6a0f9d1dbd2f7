//! Checkpoint container.
//!
//! ```text
//! "KDCK"  u32 version (=1)
//! u32 descriptor length, descriptor bytes (UTF-8 architecture descriptor)
//! u32 parameter count
//! per parameter:
//!   u32 name length, name bytes, u32 rank, rank × u32 dims, f32 LE data
//! ```
//! All integers little-endian.

use std::fs;
use std::path::Path;

use crate::scalar::Scalar;

use super::{ArchSpec, NnetError, Result, SegNet};

const MAGIC: &[u8; 4] = b"KDCK";
const VERSION: u32 = 1;

pub fn checkpoint_to_bytes<T: Scalar>(net: &SegNet<T>) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    let desc = net.arch.descriptor();
    out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
    out.extend_from_slice(desc.as_bytes());
    let specs = net.param_specs();
    out.extend_from_slice(&(specs.len() as u32).to_le_bytes());
    for ((name, shape), data) in specs.iter().zip(net.params()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_f32_bits().to_le_bytes());
        }
    }
    out
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
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| NnetError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| NnetError::Format("non-UTF-8 string".into()))
    }
}

pub fn checkpoint_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<SegNet<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(NnetError::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(NnetError::Format(format!("unsupported version {version}")));
    }
    let arch = ArchSpec::parse(&r.string()?)?;
    let mut net = SegNet::<T>::zeros(&arch);
    let specs = net.param_specs();
    let count = r.u32()? as usize;
    if count != specs.len() {
        return Err(NnetError::Format(format!(
            "{count} parameters, architecture has {}",
            specs.len()
        )));
    }
    let mut params = net.params_mut();
    for ((name, shape), dst) in specs.iter().zip(params.iter_mut()) {
        let got = r.string()?;
        if &got != name {
            return Err(NnetError::Format(format!("expected parameter {name}, found {got}")));
        }
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if &dims != shape {
            return Err(NnetError::Format(format!("{name}: shape {dims:?}, expected {shape:?}")));
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n * 4)?;
        for (d, b) in dst.iter_mut().zip(raw.chunks_exact(4)) {
            *d = T::from_f32_bits(u32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        }
    }
    if r.pos != bytes.len() {
        return Err(NnetError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    drop(params);
    Ok(net)
}

pub fn write_checkpoint<T: Scalar>(net: &SegNet<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, checkpoint_to_bytes(net))?;
    Ok(())
}

pub fn read_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<SegNet<T>> {
    checkpoint_from_bytes(&fs::read(path)?)
}
