//! Checkpoint file, little-endian:
//!
//! ```text
//! "DSVA-CKPT" | version u32 | count u32
//! per parameter: name_len u32 | name utf-8 | rank u32 | dims u64 * rank | f64 * numel
//! crc32 u32 over every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::diffcore::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CKPT_MAGIC: &[u8; 9] = b"DSVA-CKPT";
pub const CKPT_VERSION: u32 = 1;

pub fn checkpoint_bytes(store: &ParamStore) -> Vec<u8> {
    let mut out = CKPT_MAGIC.to_vec();
    out.extend(CKPT_VERSION.to_le_bytes());
    out.extend((store.len() as u32).to_le_bytes());
    for (_, name, t) in store.iter() {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend(crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.pos as u64, format!("truncated {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Decodes and validates checkpoint bytes into `(name, tensor)` pairs in file
/// order.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < CKPT_MAGIC.len() + 12 {
        return Err(Error::format(0, "file too short for a checkpoint"));
    }
    let body = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body..].try_into().expect("4 bytes"));
    if crc32fast::hash(&bytes[..body]) != stored {
        return Err(Error::format(body as u64, "checksum mismatch"));
    }
    let mut r = Reader {
        buf: &bytes[..body],
        pos: 0,
    };
    if r.take(CKPT_MAGIC.len(), "magic")? != CKPT_MAGIC {
        return Err(Error::format(0, "bad magic"));
    }
    let version = r.u32("version")?;
    if version != CKPT_VERSION {
        return Err(Error::format(9, format!("unsupported version {version}")));
    }
    let count = r.u32("count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let at = r.pos as u64;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(at, "name is not utf-8"))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::format(at, format!("rank {rank} for '{name}'")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dim")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.buf.len()))
            .ok_or_else(|| Error::format(at, format!("shape {shape:?} of '{name}' exceeds the file")))?;
        let raw = r.take(numel * 8, "payload")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != body {
        return Err(Error::format(r.pos as u64, "trailing bytes before checksum"));
    }
    Ok(out)
}

/// Writes through a temporary file so an interrupted save keeps the previous
/// checkpoint.
pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, checkpoint_bytes(store)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Replaces every parameter of `store` with the checkpoint's value. Names and
/// shapes must match exactly.
pub fn load_checkpoint(store: &mut ParamStore, path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let entries = parse_checkpoint(&bytes)?;
    if entries.len() != store.len() {
        return Err(Error::contract(format!(
            "{}: checkpoint holds {} parameters, model has {}",
            path.display(),
            entries.len(),
            store.len()
        )));
    }
    for (name, t) in entries {
        let id = store
            .id_of(&name)
            .ok_or_else(|| Error::contract(format!("{}: unknown parameter '{name}'", path.display())))?;
        let dst = store.get_mut(id);
        if dst.shape() != t.shape() {
            return Err(Error::contract(format!(
                "{}: '{name}' has shape {:?}, model expects {:?}",
                path.display(),
                t.shape(),
                dst.shape()
            )));
        }
        dst.data_mut().copy_from_slice(t.data());
    }
    Ok(())
}
