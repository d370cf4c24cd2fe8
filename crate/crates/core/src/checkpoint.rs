//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        4 bytes  "DNAS"
//! version      u32
//! config hash  32 bytes (SHA-256 of the canonical config JSON)
//! blob count   u32
//! blob*        u16 name length, name (UTF-8), u8 role (0 weight, 1 alpha),
//!              u32 ndim, ndim x u32 dims, prod(dims) x f64 values
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DNAS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlobRole {
    Weight,
    Alpha,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub name: String,
    pub role: BlobRole,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: [u8; 32],
    pub blobs: Vec<Blob>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, config_hash: [u8; 32]) -> Self {
        Self {
            version: FORMAT_VERSION,
            config_hash,
            blobs: store
                .iter()
                .map(|(_, p)| Blob {
                    name: p.name.clone(),
                    role: if p.role.is_alpha() {
                        BlobRole::Alpha
                    } else {
                        BlobRole::Weight
                    },
                    value: p.value.clone(),
                })
                .collect(),
        }
    }

    pub fn blob(&self, name: &str) -> Option<&Blob> {
        self.blobs.iter().find(|b| b.name == name)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for b in &self.blobs {
            out.extend_from_slice(&(b.name.len() as u16).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.push(match b.role {
                BlobRole::Weight => 0,
                BlobRole::Alpha => 1,
            });
            out.extend_from_slice(&(b.value.shape().len() as u32).to_le_bytes());
            for &d in b.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in b.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                detail: "not a checkpoint (bad magic)".into(),
            });
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format {
                offset: 4,
                detail: format!("unsupported checkpoint version {version}"),
            });
        }
        let mut config_hash = [0u8; 32];
        config_hash.copy_from_slice(r.take(32)?);
        let count = r.u32()?;
        let mut blobs = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let at = r.pos;
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format {
                offset: at as u64,
                detail: "parameter name is not UTF-8".into(),
            })?;
            let role = match r.take(1)?[0] {
                0 => BlobRole::Weight,
                1 => BlobRole::Alpha,
                other => {
                    return Err(Error::Format {
                        offset: (r.pos - 1) as u64,
                        detail: format!("unknown role byte {other}"),
                    })
                }
            };
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Format {
                offset: r.pos as u64,
                detail: "blob size overflows".into(),
            })?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let value = Tensor::new(shape, data).map_err(|e| Error::Format {
                offset: at as u64,
                detail: e.to_string(),
            })?;
            blobs.push(Blob { name, role, value });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                detail: "trailing bytes after last blob".into(),
            });
        }
        Ok(Self {
            version,
            config_hash,
            blobs,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Writes every blob into the store. Names must all exist with matching
    /// shapes, and every store parameter must be covered.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        if self.blobs.len() != store.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, model has {}",
                self.blobs.len(),
                store.len()
            )));
        }
        for b in &self.blobs {
            let id = store
                .id(&b.name)
                .ok_or_else(|| Error::Config(format!("model has no parameter {:?}", b.name)))?;
            let p = store.get_mut(id);
            if p.value.shape() != b.value.shape() {
                return Err(Error::Config(format!(
                    "parameter {:?}: checkpoint shape {:?}, model shape {:?}",
                    b.name,
                    b.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = b.value.clone();
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                detail: format!("unexpected end of data, wanted {n} bytes"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}
