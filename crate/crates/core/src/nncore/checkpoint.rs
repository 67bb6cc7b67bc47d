//! Binary parameter files.
//!
//! Little-endian layout: magic, version, flags, architecture digest, parent
//! digest, descriptor, metadata, then one record per parameter entry.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nncore::{ParamEntry, ParamStore, Scalar};

pub const MAGIC: &[u8; 8] = b"MAVGCKPT";
pub const VERSION: u32 = 1;
const FLAG_MOMENTS: u8 = 1;

/// SHA-256 of an architecture manifest.
pub fn arch_digest(manifest: &str) -> [u8; 32] {
    Sha256::digest(manifest.as_bytes()).into()
}

pub fn hex(d: &[u8]) -> String {
    d.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: [u8; 32],
    pub parent: [u8; 32],
    pub descriptor: String,
    /// `key=value` lines.
    pub metadata: Vec<(String, String)>,
    pub params: ParamStore<f32>,
    pub has_moments: bool,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(if self.has_moments { FLAG_MOMENTS } else { 0 });
        out.extend_from_slice(&self.arch);
        out.extend_from_slice(&self.parent);
        put_str(&mut out, &self.descriptor);
        let meta: String = self
            .metadata
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        put_str(&mut out, &meta);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, e) in self.params.iter() {
            put_str(&mut out, name);
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for d in &e.shape {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            put_f32s(&mut out, &e.value);
            if self.has_moments {
                out.extend_from_slice(&e.step.to_le_bytes());
                put_f32s(&mut out, &e.m);
                put_f32s(&mut out, &e.v);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let flags = r.take(1)?[0];
        let has_moments = flags & FLAG_MOMENTS != 0;
        let arch: [u8; 32] = r.take(32)?.try_into().unwrap();
        let parent: [u8; 32] = r.take(32)?.try_into().unwrap();
        let descriptor = r.string()?;
        let metadata = r
            .string()?
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| {
                let (k, v) = l.split_once('=').unwrap_or((l, ""));
                (k.to_string(), v.to_string())
            })
            .collect();
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::Checkpoint(format!("{name}: implausible rank {rank}")));
            }
            let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let len = shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d));
            let len = len.filter(|l| *l <= bytes.len() / 4).ok_or_else(|| {
                Error::Checkpoint(format!("{name}: shape {shape:?} exceeds file size"))
            })?;
            let value = r.f32s(len)?;
            let mut entry = ParamEntry::new(shape, value)?;
            if has_moments {
                entry.step = r.u64()?;
                entry.m = r.f32s(len)?;
                entry.v = r.f32s(len)?;
            }
            params
                .insert(name, entry)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after last entry",
                bytes.len() - r.pos
            )));
        }
        if !params.all_finite() {
            return Err(Error::Checkpoint("non-finite parameter values".into()));
        }
        Ok(Self {
            arch,
            parent,
            descriptor,
            metadata,
            params,
            has_moments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Fails unless the stored architecture digest equals `expected`.
    pub fn expect_arch(&self, expected: &[u8; 32]) -> Result<()> {
        if &self.arch != expected {
            return Err(Error::Checkpoint(format!(
                "architecture digest {} does not match expected {}",
                hex(&self.arch),
                hex(expected)
            )));
        }
        Ok(())
    }

    /// Parameters in working precision.
    pub fn params_as<T: Scalar>(&self) -> ParamStore<T> {
        self.params.cast()
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
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
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8 string".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
