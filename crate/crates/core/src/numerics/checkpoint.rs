//! Binary weight container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"LTCKPT01"
//! u32     metadata length, then that many UTF-8 bytes
//! u32     tensor count
//! repeat: u32 name length, name bytes, u32 ndim, u64 × ndim dims,
//!         f64 × numel raw values
//! ```
//!
//! A plain-text manifest of the layer stack is written next to it with the
//! extension `.manifest`.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use super::{ParamStore, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"LTCKPT01";

/// A decoded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub metadata: String,
    pub params: ParamStore,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".manifest");
    PathBuf::from(p)
}

pub fn encode(store: &ParamStore, metadata: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(store.num_scalars() * 8 + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(metadata.len() as u32).to_le_bytes());
    out.extend_from_slice(metadata.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
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

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let metadata = cur.string()?;
    let count = cur.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = cur.string()?;
        let ndim = cur.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.add(name, Tensor::new(shape, data)?)?;
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(Checkpoint { metadata, params })
}

/// Writes the container and its `.manifest` companion.
pub fn save(path: &Path, store: &ParamStore, metadata: &str, manifest: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::file(path, e))?;
    f.write_all(&encode(store, metadata)).map_err(|e| Error::file(path, e))?;
    let mpath = manifest_path(path);
    fs::write(&mpath, manifest).map_err(|e| Error::file(&mpath, e))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::file(path, e))?;
    decode(&bytes)
}
