//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   "PRIMECKP"
//! version    u32       FORMAT_VERSION
//! config     32 bytes  SHA-256 of the model config
//! count      u32       number of parameters
//! repeated count times, in registry order:
//!   id_len   u32, id bytes (UTF-8)
//!   tag      u8        0 pretrained, 1 lightweight, 2 head
//!   ndims    u32, dims u64 × ndims
//!   values   f64 × product(dims)
//! ```

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::{Parameter, ParameterRegistry, Partition};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PRIMECKP";
pub const FORMAT_VERSION: u32 = 1;

/// SHA-256 of a config's canonical JSON encoding.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConfigHash(pub [u8; 32]);

impl ConfigHash {
    pub fn of<T: Serialize>(config: &T) -> Result<Self> {
        let json = serde_json::to_vec(config)?;
        Ok(Self(Sha256::digest(&json).into()))
    }

    pub fn hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Debug for ConfigHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ConfigHash({})", &self.hex()[..16])
    }
}

impl fmt::Display for ConfigHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.hex())
    }
}

pub fn encode(registry: &ParameterRegistry, hash: &ConfigHash) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&hash.0);
    out.extend_from_slice(&(registry.len() as u32).to_le_bytes());
    for p in registry.iter() {
        let id = p.id().as_bytes();
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id);
        out.push(p.partition().tag());
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
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

/// Decodes a checkpoint. With `expected` set, a different embedded config
/// hash is rejected.
pub fn decode(bytes: &[u8], expected: Option<&ConfigHash>) -> Result<(ParameterRegistry, ConfigHash)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let hash = ConfigHash(r.take(32)?.try_into().expect("32 bytes"));
    if let Some(want) = expected {
        if *want != hash {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint {}, config {}",
                hash.hex(),
                want.hex()
            )));
        }
    }
    let count = r.u32()?;
    let mut registry = ParameterRegistry::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let id = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("parameter id: {e}")))?
            .to_string();
        let tag = r.take(1)?[0];
        let partition = Partition::from_tag(tag)
            .ok_or_else(|| Error::Checkpoint(format!("{id}: unknown partition tag {tag}")))?;
        let ndims = r.u32()? as usize;
        let shape = (0..ndims)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        registry.insert(Parameter::new(id, Tensor::new(shape, data)?, partition))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok((registry, hash))
}

pub fn save(path: impl AsRef<Path>, registry: &ParameterRegistry, hash: &ConfigHash) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(registry, hash))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>, expected: Option<&ConfigHash>) -> Result<(ParameterRegistry, ConfigHash)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    decode(&bytes, expected)
}
