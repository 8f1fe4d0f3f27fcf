//! Versioned binary container for named `f64` arrays plus a JSON header.
//!
//! Layout (little endian): magic `DSTW`, `u32` version, `u64` header length,
//! header JSON, `u64` payload length, payload (`f64` values of every array in
//! header order), then the 32-byte SHA-256 of the payload.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DSTW";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

/// A decoded container.
#[derive(Debug, Clone)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.to_string(),
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.arrays.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(name, t)| ArrayEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut payload = Vec::new();
        for (_, t) in &self.arrays {
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(payload.len() + header.len() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&Sha256::digest(&payload));
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut r)?);
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let hlen = u64::from_le_bytes(take(&mut r)?) as usize;
        if hlen > r.len() {
            return Err(Error::CorruptCheckpoint("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&r[..hlen])
            .map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;
        r = &r[hlen..];
        let plen = u64::from_le_bytes(take(&mut r)?) as usize;
        if r.len() != plen + 32 {
            return Err(Error::CorruptCheckpoint("payload length mismatch".into()));
        }
        let (payload, digest) = r.split_at(plen);
        if Sha256::digest(payload).as_slice() != digest {
            return Err(Error::CorruptCheckpoint("payload checksum mismatch".into()));
        }
        let expected: usize = header.arrays.iter().map(|a| a.shape.iter().product::<usize>()).sum();
        if expected * 8 != plen {
            return Err(Error::CorruptCheckpoint("array sizes disagree with payload".into()));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let arrays = header
            .arrays
            .into_iter()
            .map(|a| {
                let n = a.shape.iter().product();
                let data: Vec<f64> = values.by_ref().take(n).collect();
                (a.name, Tensor::from_parts(a.shape, data))
            })
            .collect();
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        std::fs::File::create(&tmp)?.write_all(&bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::CorruptCheckpoint("unexpected end of file".into()))
}

fn take<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}
